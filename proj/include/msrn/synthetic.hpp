#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msrn/data.hpp"
#include "msrn/rng.hpp"

namespace msrn {

/// Small labelled scene for smoke tests and end-to-end checks: vertical
/// stripes of classes, each with a Gaussian bump at its own spectral position
/// plus white noise. The defaults put a nearest-class-mean classifier at
/// roughly 99% accuracy.
struct SyntheticSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t bands = 20;
  std::size_t classes = 3;
  double baseline = 0.5;
  double bump_height = 1.0;
  double bump_width = 2.5;  // in bands
  double noise_std = 0.5;
  std::uint64_t seed = 2024;
};

struct SyntheticScene {
  HsiCube cube;
  LabelMap labels;
  ClassInfo info;
  std::vector<std::vector<double>> class_means;  // noise-free spectrum per class
};

inline std::vector<double> synthetic_mean_spectrum(const SyntheticSpec& s, std::size_t cls) {
  const double centre = (static_cast<double>(cls) + 0.5) * static_cast<double>(s.bands) / static_cast<double>(s.classes) - 0.5;
  std::vector<double> out(s.bands);
  for (std::size_t b = 0; b < s.bands; ++b) {
    const double d = static_cast<double>(b) - centre;
    out[b] = s.baseline + s.bump_height * std::exp(-d * d / (2.0 * s.bump_width * s.bump_width));
  }
  return out;
}

inline SyntheticScene make_synthetic_scene(const SyntheticSpec& s = {}) {
  if (s.classes < 2 || s.width < s.classes || s.height < 1 || s.bands < 1) {
    throw ConfigError("synthetic scene needs >= 2 classes and at least one column per class");
  }
  SyntheticScene scene{HsiCube(s.height, s.width, s.bands), LabelMap(s.height, s.width), {}, {}};
  for (std::size_t c = 0; c < s.classes; ++c) scene.class_means.push_back(synthetic_mean_spectrum(s, c));

  Rng rng(derive_seed(s.seed, 0x5c3e));
  for (std::size_t row = 0; row < s.height; ++row)
    for (std::size_t col = 0; col < s.width; ++col) {
      const std::size_t cls = col * s.classes / s.width;
      scene.labels.at(row, col) = static_cast<std::uint16_t>(cls + 1);
      for (std::size_t b = 0; b < s.bands; ++b) {
        // Stored as float32 so the scene survives a file round-trip unchanged.
        scene.cube.at(row, col, b) = static_cast<float>(scene.class_means[cls][b] + rng.normal(0.0, s.noise_std));
      }
    }

  for (std::size_t c = 0; c < s.classes; ++c) {
    scene.info.names.push_back("class_" + std::to_string(c + 1));
    const auto hue = static_cast<std::uint8_t>(40 + 215 * c / (s.classes - 1));
    scene.info.palette.push_back(Rgb{hue, static_cast<std::uint8_t>(255 - hue), static_cast<std::uint8_t>(60 + c * 50 % 196)});
  }
  return scene;
}

}  // namespace msrn
