#include "semiseg/inference.hpp"

#include <string>

namespace semiseg::inference {

std::vector<std::int64_t> window_starts(std::int64_t size, std::int64_t window, std::int64_t stride) {
  if (window > size) throw ConfigError("window " + std::to_string(window) + " exceeds volume extent " + std::to_string(size));
  if (window <= 0 || stride <= 0) throw ConfigError("window and stride must be positive");
  std::vector<std::int64_t> out;
  for (std::int64_t s = 0; s + window < size; s += stride) out.push_back(s);
  if (out.empty() || out.back() != size - window) out.push_back(size - window);
  return out;
}

Tensor<float> sliding_window_predict(const PatchModel& model, const Volume& v, const Dims3& window,
                                     const Dims3& stride) {
  const Dims3 size = v.dims();
  const auto xs = window_starts(size[0], window[0], stride[0]);
  const auto ys = window_starts(size[1], window[1], stride[1]);
  const auto zs = window_starts(size[2], window[2], stride[2]);

  Tensor<float> acc;
  std::int64_t C = 0;
  const std::int64_t n = size[0] * size[1] * size[2];
  Tensor<float> patch({1, window[0], window[1], window[2]});
  for (auto x0 : xs)
    for (auto y0 : ys)
      for (auto z0 : zs) {
        for (std::int64_t i = 0; i < window[0]; ++i)
          for (std::int64_t j = 0; j < window[1]; ++j)
            for (std::int64_t k = 0; k < window[2]; ++k)
              patch[(i * window[1] + j) * window[2] + k] = v.data[((x0 + i) * size[1] + y0 + j) * size[2] + z0 + k];
        const Tensor<float> p = model(patch);
        if (p.rank() != 4 || p.dim(1) != window[0] || p.dim(2) != window[1] || p.dim(3) != window[2])
          throw ShapeError("sliding window model returned " + shape_str(p.shape()));
        if (acc.empty()) {
          C = p.dim(0);
          acc = Tensor<float>({C, size[0], size[1], size[2]});
        }
        const std::int64_t wn = window[0] * window[1] * window[2];
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t i = 0; i < window[0]; ++i)
            for (std::int64_t j = 0; j < window[1]; ++j)
              for (std::int64_t k = 0; k < window[2]; ++k)
                acc[c * n + ((x0 + i) * size[1] + y0 + j) * size[2] + z0 + k] +=
                    p[c * wn + (i * window[1] + j) * window[2] + k];
      }
  // Averaging then renormalising equals renormalising the summed votes.
  for (std::int64_t i = 0; i < n; ++i) {
    float z = 0;
    for (std::int64_t c = 0; c < C; ++c) z += acc[c * n + i];
    for (std::int64_t c = 0; c < C; ++c) acc[c * n + i] /= z;
  }
  return acc;
}

}  // namespace semiseg::inference
