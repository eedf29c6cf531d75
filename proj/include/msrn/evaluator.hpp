#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "msrn/checkpoint.hpp"
#include "msrn/data.hpp"
#include "msrn/error.hpp"
#include "msrn/inference.hpp"
#include "msrn/split.hpp"

namespace msrn {

/// K x K counts, rows = true class, columns = predicted class (both 0-based
/// here; labels on the way in are 1-based).
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_.at(truth * k_ + pred); }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  std::uint64_t row_sum(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < k_; ++j) t += at(c, j);
    return t;
  }
  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < k_; ++i) t += at(i, c);
    return t;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("cannot add confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows.size()) throw ShapeError("confusion matrix rows must be square");
      for (std::size_t j = 0; j < rows.size(); ++j) cm.at(i, j) = rows[i][j];
    }
    return cm;
  }

 private:
  std::size_t k_ = 0;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_matrix(std::span<const std::uint16_t> truth, std::span<const std::uint16_t> pred,
                                        std::size_t classes) {
  if (truth.size() != pred.size()) {
    throw ShapeError("truth has " + std::to_string(truth.size()) + " labels, predictions have " +
                     std::to_string(pred.size()));
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 1 || truth[i] > classes || pred[i] < 1 || pred[i] > classes) {
      throw DataError("label pair (" + std::to_string(truth[i]) + ", " + std::to_string(pred[i]) + ") at position " +
                      std::to_string(i) + " outside 1.." + std::to_string(classes));
    }
    ++cm.at(truth[i] - 1u, pred[i] - 1u);
  }
  return cm;
}

struct Metrics {
  double overall_accuracy = 0.0;
  double average_accuracy = 0.0;
  double kappa = 0.0;
  std::vector<double> class_recall;        // NaN for classes without samples
  std::vector<std::size_t> empty_classes;  // 0-based, excluded from AA
};

inline Metrics metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DataError("cannot compute metrics on an empty confusion matrix");
  const double n = static_cast<double>(total);
  Metrics m;
  double trace = 0.0, pe = 0.0, recall_sum = 0.0;
  std::size_t nonempty = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const double row = static_cast<double>(cm.row_sum(c));
    trace += static_cast<double>(cm.at(c, c));
    pe += row * static_cast<double>(cm.col_sum(c));
    if (row == 0.0) {
      m.class_recall.push_back(std::numeric_limits<double>::quiet_NaN());
      m.empty_classes.push_back(c);
    } else {
      m.class_recall.push_back(static_cast<double>(cm.at(c, c)) / row);
      recall_sum += m.class_recall.back();
      ++nonempty;
    }
  }
  pe /= n * n;
  m.overall_accuracy = trace / n;
  m.average_accuracy = recall_sum / static_cast<double>(nonempty);
  if (pe >= 1.0) throw DegenerateError("kappa is undefined: chance agreement is 1 (single class in truth and prediction)");
  m.kappa = (m.overall_accuracy - pe) / (1.0 - pe);
  return m;
}

// Percentages follow the reporting convention: OA and AA in %, Kappa x 100.
inline nlohmann::json metrics_to_json(const ConfusionMatrix& cm, const Metrics& m,
                                      const std::vector<std::string>& class_names = {}) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    nlohmann::json row = {{"class", c + 1}, {"samples", cm.row_sum(c)}};
    if (c < class_names.size()) row["name"] = class_names[c];
    row["recall"] = std::isnan(m.class_recall[c]) ? nlohmann::json(nullptr) : nlohmann::json(m.class_recall[c]);
    per_class.push_back(row);
  }
  nlohmann::json matrix = nlohmann::json::array();
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < cm.classes(); ++j) row.push_back(cm.at(i, j));
    matrix.push_back(row);
  }
  nlohmann::json empty = nlohmann::json::array();
  for (auto c : m.empty_classes) empty.push_back(c + 1);
  return {{"oa", m.overall_accuracy},
          {"aa", m.average_accuracy},
          {"kappa", m.kappa},
          {"oa_percent", m.overall_accuracy * 100.0},
          {"aa_percent", m.average_accuracy * 100.0},
          {"kappa_x100", m.kappa * 100.0},
          {"samples", cm.total()},
          {"classes_without_samples", empty},
          {"per_class", per_class},
          {"confusion_matrix", matrix}};
}

inline ConfusionMatrix confusion_from_json(const nlohmann::json& report) {
  return ConfusionMatrix::from_rows(report.at("confusion_matrix").get<std::vector<std::vector<std::uint64_t>>>());
}

struct Evaluation {
  ConfusionMatrix confusion;
  Metrics metrics;
};

/// EVAL-mode predictions of every pixel in one partition, scored against labels.
inline Evaluation evaluate_split(const Checkpoint& ckpt, const HsiCube& cube, const LabelMap& labels,
                                 const SplitAssignment& split, Part part, std::size_t batch_size = 64) {
  check_pairing(cube, labels);
  const HsiCube prepared = prepare_cube(ckpt, cube);
  const auto& pixels = split.part(part);
  if (pixels.empty()) throw DataError(std::string("partition ") + part_name(part) + " is empty");
  const auto pred = argmax_classes(pixel_logits(ckpt.model, prepared, pixels, batch_size));
  std::vector<std::uint16_t> truth;
  truth.reserve(pixels.size());
  for (auto p : pixels) truth.push_back(labels.labels[p]);
  Evaluation e{confusion_matrix(truth, pred, ckpt.spec().classes), {}};
  e.metrics = metrics(e.confusion);
  return e;
}

// ---------------------------------------------------------------------------
// Classification maps

/// Predicted 1-based class per pixel; 0 for unlabeled pixels when masking.
inline LabelMap predict_map(const Checkpoint& ckpt, const HsiCube& cube, const LabelMap* mask_with = nullptr,
                            std::size_t batch_size = 64) {
  const HsiCube prepared = prepare_cube(ckpt, cube);
  if (mask_with) check_pairing(cube, *mask_with);
  std::vector<std::uint32_t> pixels;
  for (std::size_t p = 0; p < cube.pixels(); ++p) {
    if (!mask_with || mask_with->labels[p] != 0) pixels.push_back(static_cast<std::uint32_t>(p));
  }
  LabelMap out(cube.height, cube.width);
  const auto pred = argmax_classes(pixel_logits(ckpt.model, prepared, pixels, batch_size));
  for (std::size_t i = 0; i < pixels.size(); ++i) out.labels[pixels[i]] = pred[i];
  return out;
}

/// Binary PPM (P6); class c gets palette[c-1], class 0 is black.
inline std::string encode_ppm(const LabelMap& map, const std::vector<Rgb>& palette, std::size_t classes) {
  if (palette.size() < classes) {
    throw ConfigError("palette has " + std::to_string(palette.size()) + " colours, " + std::to_string(classes) +
                      " classes need one each");
  }
  std::string out = "P6\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  out.reserve(out.size() + map.pixels() * 3);
  for (auto label : map.labels) {
    if (label > classes) throw DataError("map label " + std::to_string(label) + " exceeds class count");
    const Rgb rgb = label == 0 ? Rgb{0, 0, 0} : palette[label - 1u];
    out.append(reinterpret_cast<const char*>(rgb.data()), 3);
  }
  return out;
}

inline void render_map(const std::filesystem::path& path, const Checkpoint& ckpt, const HsiCube& cube,
                       const LabelMap& labels, const ClassInfo& info, bool mask_unlabeled, std::size_t batch_size = 64) {
  check_pairing(cube, labels);
  if (info.palette.size() < ckpt.spec().classes) {
    throw ConfigError("sidecar palette has " + std::to_string(info.palette.size()) + " colours, " +
                      std::to_string(ckpt.spec().classes) + " classes need one each");
  }
  const LabelMap map = predict_map(ckpt, cube, mask_unlabeled ? &labels : nullptr, batch_size);
  io::write_file(path, encode_ppm(map, info.palette, ckpt.spec().classes));
}

}  // namespace msrn
