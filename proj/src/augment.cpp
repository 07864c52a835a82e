#include "semiseg/augment.hpp"

#include <vector>

namespace semiseg::augment {
namespace {

// Source index of every view position along one axis.
std::vector<std::int64_t> axis_map(const AugRecord& r, int axis) {
  const std::int64_t n = r.crop_size[axis];
  std::vector<std::int64_t> m(static_cast<std::size_t>(n));
  for (std::int64_t v = 0; v < n; ++v) m[v] = r.crop_offset[axis] + (r.flips[axis] ? n - 1 - v : v);
  return m;
}

// Inverse of axis_map restricted to the crop: source index -> view index or -1.
std::vector<std::int64_t> axis_inverse(const AugRecord& r, int axis) {
  std::vector<std::int64_t> inv(static_cast<std::size_t>(r.source_size[axis]), -1);
  const auto fwd = axis_map(r, axis);
  for (std::size_t v = 0; v < fwd.size(); ++v) inv[fwd[v]] = static_cast<std::int64_t>(v);
  return inv;
}

template <typename T>
Tensor<T> gather_view(const Tensor<T>& field, std::int64_t channels, const Dims3& src, const AugRecord& rec) {
  const auto mi = axis_map(rec, 0), mj = axis_map(rec, 1), mk = axis_map(rec, 2);
  const Dims3& c = rec.crop_size;
  Shape out_shape = field.rank() == 3 ? Shape{c[0], c[1], c[2]} : Shape{channels, c[0], c[1], c[2]};
  Tensor<T> out(out_shape);
  const std::int64_t src_n = src[0] * src[1] * src[2], dst_n = c[0] * c[1] * c[2];
  for (std::int64_t ch = 0; ch < channels; ++ch)
    for (std::int64_t i = 0; i < c[0]; ++i)
      for (std::int64_t j = 0; j < c[1]; ++j) {
        const T* s = field.data() + ch * src_n + (mi[i] * src[1] + mj[j]) * src[2];
        T* d = out.data() + ch * dst_n + (i * c[1] + j) * c[2];
        for (std::int64_t k = 0; k < c[2]; ++k) d[k] = s[mk[k]];
      }
  return out;
}

Box sample_box(const Dims3& crop, std::mt19937_64& rng, const StrongOptions& opt) {
  std::uniform_real_distribution<double> frac(opt.cutmix_box_range[0], opt.cutmix_box_range[1]);
  Box b;
  for (int a = 0; a < 3; ++a) {
    const auto side = std::clamp<std::int64_t>(static_cast<std::int64_t>(frac(rng) * static_cast<double>(crop[a]) + 0.5),
                                               1, crop[a]);
    std::uniform_int_distribution<std::int64_t> pos(0, crop[a] - side);
    b.lo[a] = pos(rng);
    b.hi[a] = b.lo[a] + side;
  }
  return b;
}

void add_noise(Volume& v, std::uint64_t seed, double sigma) {
  if (sigma <= 0.0) return;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, static_cast<float>(sigma));
  for (auto& x : v.data.storage()) x += nd(rng);
}

}  // namespace

void AugRecord::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (crop_size[a] <= 0 || crop_offset[a] < 0 || crop_offset[a] + crop_size[a] > source_size[a])
      throw ConfigError("augmentation crop box lies outside the source volume");
  }
  if (cutmix) {
    for (int a = 0; a < 3; ++a)
      if (cutmix->box.lo[a] < 0 || cutmix->box.hi[a] > crop_size[a] || cutmix->box.lo[a] > cutmix->box.hi[a])
        throw ConfigError("CutMix box lies outside the crop");
  }
}

AugRecord sample_geometry(const Dims3& source, const Dims3& crop, std::mt19937_64& rng) {
  AugRecord r;
  r.source_size = source;
  r.crop_size = crop;
  for (int a = 0; a < 3; ++a) {
    if (crop[a] > source[a] || crop[a] <= 0)
      throw ConfigError("crop size " + std::to_string(crop[a]) + " exceeds volume extent " + std::to_string(source[a]));
    std::uniform_int_distribution<std::int64_t> off(0, source[a] - crop[a]);
    r.crop_offset[a] = off(rng);
  }
  std::bernoulli_distribution coin(0.5);
  for (auto& f : r.flips) f = coin(rng);
  return r;
}

Volume apply_geometry(const Volume& v, const AugRecord& rec) {
  if (v.dims() != rec.source_size) throw ShapeError("augmentation record was sampled for a different volume size");
  rec.validate();
  Volume out;
  out.data = gather_view(v.data, 1, rec.source_size, rec);
  out.spacing = v.spacing;
  out.id = v.id;
  return out;
}

template <typename T>
Tensor<T> apply_geometry(const Tensor<T>& field, const AugRecord& rec) {
  if (field.rank() != 4 || field.dim(1) != rec.source_size[0] || field.dim(2) != rec.source_size[1] ||
      field.dim(3) != rec.source_size[2])
    throw ShapeError("apply_geometry: field " + shape_str(field.shape()) + " does not match the record");
  rec.validate();
  return gather_view(field, field.dim(0), rec.source_size, rec);
}

LabelMask apply_geometry(const LabelMask& m, const AugRecord& rec) {
  if (m.dims() != rec.source_size) throw ShapeError("augmentation record was sampled for a different mask size");
  rec.validate();
  LabelMask out;
  out.num_classes = m.num_classes;
  out.classes = gather_view(m.classes, 1, rec.source_size, rec);
  return out;
}

std::pair<Volume, AugRecord> weak_augment(const Volume& v, const Dims3& crop, std::mt19937_64& rng) {
  AugRecord rec = sample_geometry(v.dims(), crop, rng);
  return {apply_geometry(v, rec), rec};
}

Volume replay_strong(const Volume& v, const Volume& partner_view, const AugRecord& rec) {
  Volume out = apply_geometry(v, rec);
  if (rec.cutmix && !rec.cutmix->box.empty()) {
    if (partner_view.dims() != rec.crop_size)
      throw ShapeError("CutMix partner view must have the crop shape");
    const Box& b = rec.cutmix->box;
    const Dims3 c = rec.crop_size;
    for (std::int64_t i = b.lo[0]; i < b.hi[0]; ++i)
      for (std::int64_t j = b.lo[1]; j < b.hi[1]; ++j)
        for (std::int64_t k = b.lo[2]; k < b.hi[2]; ++k) {
          const std::int64_t idx = (i * c[1] + j) * c[2] + k;
          out.data[idx] = partner_view.data[idx];
        }
  }
  if (rec.noise_seed) add_noise(out, *rec.noise_seed, rec.noise_sigma);
  return out;
}

std::pair<Volume, AugRecord> strong_augment(const Volume& v, const Volume& partner_view, const AugRecord& geometry,
                                            int partner_index, std::mt19937_64& rng, const StrongOptions& opt) {
  if (partner_view.dims() != geometry.crop_size)
    throw ShapeError("strong_augment: partner view shape differs from the crop shape");
  AugRecord rec;
  rec.source_size = geometry.source_size;
  rec.crop_offset = geometry.crop_offset;
  rec.crop_size = geometry.crop_size;
  rec.flips = geometry.flips;
  std::bernoulli_distribution mix(opt.cutmix_prob);
  if (opt.cutmix_prob > 0.0 && mix(rng)) rec.cutmix = CutMix{sample_box(geometry.crop_size, rng, opt), partner_index};
  if (opt.noise_sigma > 0.0) {
    rec.noise_seed = rng();
    rec.noise_sigma = opt.noise_sigma;
  }
  return {replay_strong(v, partner_view, rec), rec};
}

template <typename T>
Tensor<T> align_teacher_prediction(const Tensor<T>& teacher_weak, const AugRecord& rec_weak,
                                   const AugRecord& rec_strong, const Tensor<T>* partner) {
  if (rec_weak.source_size != rec_strong.source_size)
    throw ContractViolation("weak and strong records refer to different source volumes");
  const Dims3& wc = rec_weak.crop_size;
  const Dims3& sc = rec_strong.crop_size;
  if (teacher_weak.rank() != 4 || teacher_weak.dim(1) != wc[0] || teacher_weak.dim(2) != wc[1] ||
      teacher_weak.dim(3) != wc[2])
    throw ShapeError("align: teacher field " + shape_str(teacher_weak.shape()) + " is not on the weak view");
  const std::int64_t C = teacher_weak.dim(0);
  const bool mixed = rec_strong.cutmix && !rec_strong.cutmix->box.empty();
  if (mixed) {
    if (!partner) throw ContractViolation("strong record uses CutMix but no partner prediction was given");
    if (partner->shape() != Shape{C, sc[0], sc[1], sc[2]})
      throw ShapeError("align: partner field " + shape_str(partner->shape()) + " is not on the strong view");
  }

  // strong view index -> source index -> weak view index, per axis.
  std::array<std::vector<std::int64_t>, 3> to_weak;
  for (int a = 0; a < 3; ++a) {
    const auto fwd = axis_map(rec_strong, a);
    const auto inv = axis_inverse(rec_weak, a);
    to_weak[a].resize(fwd.size());
    for (std::size_t v = 0; v < fwd.size(); ++v) to_weak[a][v] = inv[fwd[v]];
  }

  Tensor<T> out({C, sc[0], sc[1], sc[2]});
  const std::int64_t wn = wc[0] * wc[1] * wc[2], sn = sc[0] * sc[1] * sc[2];
  for (std::int64_t i = 0; i < sc[0]; ++i)
    for (std::int64_t j = 0; j < sc[1]; ++j)
      for (std::int64_t k = 0; k < sc[2]; ++k) {
        const std::int64_t dst = (i * sc[1] + j) * sc[2] + k;
        if (mixed && rec_strong.cutmix->box.contains(i, j, k)) {
          for (std::int64_t c = 0; c < C; ++c) out[c * sn + dst] = (*partner)[c * sn + dst];
          continue;
        }
        const std::int64_t wi = to_weak[0][i], wj = to_weak[1][j], wk = to_weak[2][k];
        if (wi < 0 || wj < 0 || wk < 0)
          throw ContractViolation("strong view voxel has no counterpart in the weak view (non-overlapping crops)");
        const std::int64_t src = (wi * wc[1] + wj) * wc[2] + wk;
        for (std::int64_t c = 0; c < C; ++c) out[c * sn + dst] = teacher_weak[c * wn + src];
      }
  return out;
}

LabelMask align_label(const LabelMask& weak_label, const AugRecord& rec_weak, const AugRecord& rec_strong,
                      const LabelMask* partner) {
  const Shape s4 = {1, weak_label.classes.dim(0), weak_label.classes.dim(1), weak_label.classes.dim(2)};
  Tensor<std::int32_t> partner4;
  if (partner) partner4 = partner->classes.reshaped({1, partner->classes.dim(0), partner->classes.dim(1),
                                                     partner->classes.dim(2)});
  Tensor<std::int32_t> out = align_teacher_prediction(weak_label.classes.reshaped(s4), rec_weak, rec_strong,
                                                      partner ? &partner4 : nullptr);
  LabelMask m;
  m.num_classes = weak_label.num_classes;
  m.classes = out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
  return m;
}

template Tensor<float> apply_geometry<float>(const Tensor<float>&, const AugRecord&);
template Tensor<double> apply_geometry<double>(const Tensor<double>&, const AugRecord&);
template Tensor<float> align_teacher_prediction<float>(const Tensor<float>&, const AugRecord&, const AugRecord&,
                                                       const Tensor<float>*);
template Tensor<double> align_teacher_prediction<double>(const Tensor<double>&, const AugRecord&, const AugRecord&,
                                                         const Tensor<double>*);

}  // namespace semiseg::augment
