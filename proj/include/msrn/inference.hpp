#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "msrn/data.hpp"
#include "msrn/model.hpp"

namespace msrn {

/// Eval-mode logits [n, K] for flat pixel indices of an already prepared cube,
/// evaluated in chunks of batch_size.
inline Tensor pixel_logits(const MsrnModel& model, const HsiCube& prepared, std::span<const std::uint32_t> pixels,
                           std::size_t batch_size = 64) {
  const std::size_t k = model.spec().classes;
  Tensor out({pixels.size(), k});
  for (std::size_t start = 0; start < pixels.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, pixels.size() - start);
    const Tensor logits = model.predict_logits(gather_patches(prepared, pixels.subspan(start, n), model.spec().patch_size));
    std::copy(logits.data().begin(), logits.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * k));
  }
  return out;
}

// 1-based class of the largest logit in each row (earliest index on ties).
inline std::vector<std::uint16_t> argmax_classes(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::uint16_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    out[i] = static_cast<std::uint16_t>(best + 1);
  }
  return out;
}

// Mean cross-entropy of rows against 1-based labels.
inline double mean_cross_entropy(const Tensor& logits, std::span<const std::uint16_t> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.ptr() + i * k;
    double peak = row[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - peak);
    total += std::log(z) + peak - row[labels[i] - 1];
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace msrn
