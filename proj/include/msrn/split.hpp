#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "msrn/data.hpp"
#include "msrn/error.hpp"
#include "msrn/rng.hpp"

namespace msrn {

enum class Part { Train, Val, Test };

inline const char* part_name(Part p) {
  switch (p) {
    case Part::Train: return "train";
    case Part::Val: return "val";
    case Part::Test: return "test";
  }
  return "?";
}

inline Part parse_part(const std::string& s) {
  if (s == "train") return Part::Train;
  if (s == "val") return Part::Val;
  if (s == "test") return Part::Test;
  throw ConfigError("unknown partition '" + s + "', expected train|val|test");
}

struct ClassSplitCounts {
  std::uint16_t cls = 0;
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  friend bool operator==(const ClassSplitCounts&, const ClassSplitCounts&) = default;
};

/// Disjoint train / validation / test sets of labeled pixels, stored as
/// ascending flat indices (row * width + col).
struct SplitAssignment {
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> val;
  std::vector<std::uint32_t> test;
  std::vector<ClassSplitCounts> counts;
  std::uint64_t seed = 0;
  double train_fraction = 0.0;
  double val_fraction = 0.0;

  const std::vector<std::uint32_t>& part(Part p) const {
    switch (p) {
      case Part::Train: return train;
      case Part::Val: return val;
      case Part::Test: return test;
    }
    return test;
  }

  std::size_t total(Part p) const { return part(p).size(); }

  /// Checks disjointness, that every index is a labeled pixel, that the
  /// per-class table agrees with the lists, and that every class has at least
  /// one sample in each partition.
  void validate(const LabelMap& labels) const {
    std::vector<std::uint8_t> seen(labels.pixels(), 0);
    std::map<std::uint16_t, ClassSplitCounts> tally;
    for (Part p : {Part::Train, Part::Val, Part::Test}) {
      for (std::uint32_t px : part(p)) {
        if (px >= labels.pixels()) throw DataError("split pixel " + std::to_string(px) + " outside the label map");
        const std::uint16_t cls = labels.labels[px];
        if (cls == 0) throw DataError("split pixel " + std::to_string(px) + " is unlabeled");
        if (seen[px]++) throw DataError("split pixel " + std::to_string(px) + " appears in more than one partition");
        auto& t = tally[cls];
        t.cls = cls;
        (p == Part::Train ? t.train : p == Part::Val ? t.val : t.test)++;
      }
    }
    for (const auto& [cls, t] : tally) {
      if (t.train == 0 || t.val == 0 || t.test == 0) {
        throw DataError("class " + std::to_string(cls) + " has an empty " +
                        (t.train == 0 ? "train" : t.val == 0 ? "val" : "test") + " partition");
      }
    }
    std::vector<ClassSplitCounts> expected;
    for (const auto& [cls, t] : tally) expected.push_back(t);
    if (!counts.empty() && counts != expected) throw DataError("split count table disagrees with pixel lists");
  }
};

namespace detail {

inline std::map<std::uint16_t, std::vector<std::uint32_t>> pixels_by_class(const LabelMap& labels) {
  std::map<std::uint16_t, std::vector<std::uint32_t>> out;
  for (std::size_t i = 0; i < labels.pixels(); ++i) {
    if (labels.labels[i] != 0) out[labels.labels[i]].push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

// Shuffles a class's pixels with a per-class stream and deals them out.
inline void deal(std::vector<std::uint32_t> pixels, std::uint16_t cls, std::uint64_t seed, const ClassSplitCounts& c,
                 SplitAssignment& split) {
  Rng rng(derive_seed(seed, cls));
  rng.shuffle(std::span<std::uint32_t>(pixels));
  auto it = pixels.begin();
  split.train.insert(split.train.end(), it, it + static_cast<std::ptrdiff_t>(c.train));
  it += static_cast<std::ptrdiff_t>(c.train);
  split.val.insert(split.val.end(), it, it + static_cast<std::ptrdiff_t>(c.val));
  it += static_cast<std::ptrdiff_t>(c.val);
  split.test.insert(split.test.end(), it, it + static_cast<std::ptrdiff_t>(c.test));
}

inline void finish(SplitAssignment& split, const LabelMap& labels) {
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  split.validate(labels);
}

}  // namespace detail

/// Per class with n pixels: train = max(3, round(n * f_train)), val =
/// max(1, round(n * f_val)), the rest test. Pixels are shuffled by a stream
/// derived from (seed, class) before being dealt out.
inline SplitAssignment stratified_split(const LabelMap& labels, double f_train, double f_val, std::uint64_t seed,
                                        std::size_t classes = 0) {
  if (!(f_train > 0.0 && f_val > 0.0 && f_train + f_val < 1.0)) {
    throw ConfigError("split fractions must be positive with train + val < 1");
  }
  if (classes == 0) classes = labels.max_label();
  check_labels(labels, classes);
  auto by_class = detail::pixels_by_class(labels);

  SplitAssignment split;
  split.seed = seed;
  split.train_fraction = f_train;
  split.val_fraction = f_val;
  for (std::size_t c = 1; c <= classes; ++c) {
    const auto cls = static_cast<std::uint16_t>(c);
    const std::size_t n = by_class.count(cls) ? by_class[cls].size() : 0;
    if (n < 3) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(n) + " labeled pixels, at least 3 needed");
    }
    ClassSplitCounts counts{cls, 0, 0, 0};
    counts.train = std::max<std::size_t>(3, static_cast<std::size_t>(std::llround(static_cast<double>(n) * f_train)));
    counts.val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * f_val)));
    if (counts.train + counts.val >= n) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(n) +
                      " labeled pixels, too few to leave a test sample");
    }
    counts.test = n - counts.train - counts.val;
    split.counts.push_back(counts);
    detail::deal(std::move(by_class[cls]), cls, seed, counts, split);
  }
  detail::finish(split, labels);
  return split;
}

inline nlohmann::json split_to_json(const SplitAssignment& split) {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& c : split.counts) {
    counts.push_back({{"class", c.cls}, {"train", c.train}, {"val", c.val}, {"test", c.test}});
  }
  return {{"seed", split.seed},
          {"fractions", {{"train", split.train_fraction}, {"val", split.val_fraction}}},
          {"counts", counts},
          {"totals", {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}}},
          {"pixels", {{"train", split.train}, {"val", split.val}, {"test", split.test}}}};
}

/// Builds an assignment from a split document. Explicit "pixels" lists are
/// used verbatim; otherwise the per-class "counts" table is dealt out with
/// the seeded shuffle. Counts may not exceed a class's population; pixels
/// beyond the listed counts stay unassigned.
inline SplitAssignment split_from_json(const nlohmann::json& j, const LabelMap& labels, std::uint64_t seed = 0) {
  SplitAssignment split;
  try {
    split.seed = j.value("seed", seed);
    if (j.contains("fractions")) {
      split.train_fraction = j["fractions"].value("train", 0.0);
      split.val_fraction = j["fractions"].value("val", 0.0);
    }
    if (j.contains("pixels")) {
      const auto& px = j.at("pixels");
      split.train = px.at("train").get<std::vector<std::uint32_t>>();
      split.val = px.at("val").get<std::vector<std::uint32_t>>();
      split.test = px.at("test").get<std::vector<std::uint32_t>>();
      std::sort(split.train.begin(), split.train.end());
      std::sort(split.val.begin(), split.val.end());
      std::sort(split.test.begin(), split.test.end());
      split.validate(labels);
      // Rebuild the table from the lists.
      std::map<std::uint16_t, ClassSplitCounts> tally;
      for (Part p : {Part::Train, Part::Val, Part::Test}) {
        for (auto i : split.part(p)) {
          auto& t = tally[labels.labels[i]];
          t.cls = labels.labels[i];
          (p == Part::Train ? t.train : p == Part::Val ? t.val : t.test)++;
        }
      }
      for (const auto& [cls, t] : tally) split.counts.push_back(t);
      return split;
    }
    if (!j.contains("counts")) throw FormatError("split file needs either \"pixels\" or \"counts\"");
    auto by_class = detail::pixels_by_class(labels);
    std::map<std::uint16_t, bool> listed;
    for (const auto& row : j.at("counts")) {
      ClassSplitCounts c;
      c.cls = row.at("class").get<std::uint16_t>();
      c.train = row.at("train").get<std::size_t>();
      c.val = row.at("val").get<std::size_t>();
      c.test = row.at("test").get<std::size_t>();
      if (listed[c.cls]) throw DataError("class " + std::to_string(c.cls) + " listed twice in split counts");
      listed[c.cls] = true;
      if (c.train == 0 || c.val == 0 || c.test == 0) {
        throw DataError("class " + std::to_string(c.cls) + " has an empty partition in split counts");
      }
      const std::size_t population = by_class.count(c.cls) ? by_class[c.cls].size() : 0;
      if (c.train + c.val + c.test > population) {
        throw DataError("class " + std::to_string(c.cls) + " split counts " + std::to_string(c.train + c.val + c.test) +
                        " exceed its population of " + std::to_string(population));
      }
      split.counts.push_back(c);
    }
    for (const auto& [cls, px] : by_class) {
      if (!listed[cls]) throw DataError("class " + std::to_string(cls) + " is labeled but missing from split counts");
    }
    std::sort(split.counts.begin(), split.counts.end(),
              [](const ClassSplitCounts& a, const ClassSplitCounts& b) { return a.cls < b.cls; });
    for (const auto& c : split.counts) detail::deal(by_class[c.cls], c.cls, split.seed, c, split);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split file: ") + e.what());
  }
  detail::finish(split, labels);
  return split;
}

inline SplitAssignment import_split(const std::filesystem::path& path, const LabelMap& labels, std::uint64_t seed = 0) {
  return split_from_json(io::read_json(path), labels, seed);
}

inline void save_split(const std::filesystem::path& path, const SplitAssignment& split) {
  io::write_json(path, split_to_json(split));
}

/// Shuffled mini-batches of `items` for one epoch. The order depends only on
/// (seed, epoch); the final batch keeps the remainder.
inline std::vector<std::vector<std::uint32_t>> make_batches(std::span<const std::uint32_t> items,
                                                            std::size_t batch_size, std::uint64_t seed,
                                                            std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::uint32_t> order(items.begin(), items.end());
  Rng rng(derive_seed(seed, 0xba7c4, epoch));
  rng.shuffle(std::span<std::uint32_t>(order));
  std::vector<std::vector<std::uint32_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace msrn
