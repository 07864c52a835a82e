#pragma once

#include <functional>
#include <vector>

#include "semiseg/volume.hpp"

namespace semiseg::inference {

// Maps an input patch [1, h, w, d] to class probabilities [C, h, w, d].
using PatchModel = std::function<Tensor<float>(const Tensor<float>&)>;

// Window origins along one axis: 0, s, 2s, ... plus a final window clamped to
// the border.
std::vector<std::int64_t> window_starts(std::int64_t size, std::int64_t window, std::int64_t stride);

// Averages overlapping window predictions and renormalises over classes.
Tensor<float> sliding_window_predict(const PatchModel& model, const Volume& v, const Dims3& window,
                                     const Dims3& stride);

}  // namespace semiseg::inference
