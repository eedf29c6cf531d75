#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "msrn/data.hpp"
#include "msrn/error.hpp"
#include "msrn/trainer.hpp"

namespace msrn {

/// Everything a train / gridsearch / eval / map run needs. Relative paths in
/// the file are resolved against the directory holding the config.
struct RunConfig {
  std::filesystem::path cube;
  std::filesystem::path labels;
  std::filesystem::path sidecar;
  std::optional<std::filesystem::path> split_file;

  // Used when no split file is given.
  double train_fraction = 0.10;
  double val_fraction = 0.10;
  std::optional<std::uint64_t> split_seed;  // defaults to training.seed

  std::optional<std::size_t> patch_size;  // unset: chosen from the band count
  std::size_t kernels = 24;
  bool standardize = true;

  TrainConfig training;

  std::filesystem::path output_dir = "runs/default";
  bool deterministic = true;
  std::size_t workers = 1;

  std::uint64_t effective_split_seed() const { return split_seed.value_or(training.seed); }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Patch edge used when the config leaves it unset: 13 for 200-band scenes,
/// 11 otherwise (the best sizes found for the two reference scenes).
inline std::size_t default_patch_size(std::size_t bands) { return bands == 200 ? 13 : 11; }

namespace detail {

// Reads keys of one JSON object, remembering which were consumed so leftovers
// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, const T& fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(field(key) + ": required field is missing");
    return convert<T>(key);
  }

  const nlohmann::json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  template <typename T>
  T convert(const std::string& key) {
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!v.is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      return v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(field(key) + ": invalid value " + v.dump());
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path.lexically_normal() : (base / path).lexically_normal();
}

inline void require_exists(const std::filesystem::path& p, const std::string& field) {
  if (!std::filesystem::exists(p)) throw ConfigError(field + ": file not found: " + p.string());
}

}  // namespace detail

/// Parses and validates a config document. `base` anchors relative paths.
inline RunConfig parse_config_json(const nlohmann::json& j, const std::filesystem::path& base, bool check_paths = true) {
  RunConfig c;
  detail::ObjectReader top(j, "");

  {
    if (!top.has("data")) throw ConfigError("data: required section is missing");
    detail::ObjectReader data(top.child("data"), "data");
    c.cube = detail::resolve_path(base, data.require<std::string>("cube"));
    c.labels = detail::resolve_path(base, data.require<std::string>("labels"));
    c.sidecar = detail::resolve_path(base, data.require<std::string>("sidecar"));
    if (data.has("split")) c.split_file = detail::resolve_path(base, data.require<std::string>("split"));
    data.finish();
    if (check_paths) {
      detail::require_exists(c.cube, "data.cube");
      detail::require_exists(c.labels, "data.labels");
      detail::require_exists(c.sidecar, "data.sidecar");
      if (c.split_file) detail::require_exists(*c.split_file, "data.split");
    }
  }

  if (top.has("split")) {
    detail::ObjectReader s(top.child("split"), "split");
    c.train_fraction = s.get("train_fraction", c.train_fraction);
    c.val_fraction = s.get("val_fraction", c.val_fraction);
    if (s.has("seed")) c.split_seed = s.require<std::uint64_t>("seed");
    s.finish();
  }
  if (!(c.train_fraction > 0.0 && c.val_fraction > 0.0 && c.train_fraction + c.val_fraction < 1.0)) {
    throw ConfigError("split.train_fraction, split.val_fraction: must be positive and sum to less than 1");
  }

  if (top.has("model")) {
    detail::ObjectReader m(top.child("model"), "model");
    if (m.has("patch_size")) {
      const auto s = m.require<std::size_t>("patch_size");
      if (s < 5 || s % 2 == 0) throw ConfigError("model.patch_size: must be odd and >= 5, got " + std::to_string(s));
      c.patch_size = s;
    }
    c.kernels = m.get("kernels", c.kernels);
    if (c.kernels < 1) throw ConfigError("model.kernels: must be >= 1");
    c.standardize = m.get("standardize", c.standardize);
    m.finish();
  }

  if (top.has("training")) {
    detail::ObjectReader t(top.child("training"), "training");
    TrainConfig& tc = c.training;
    tc.learning_rate = t.get("learning_rate", tc.learning_rate);
    if (t.has("lr_grid")) {
      try {
        tc.lr_grid = t.child("lr_grid").get<std::vector<double>>();
      } catch (const std::exception&) {
        throw ConfigError("training.lr_grid: expected a list of numbers");
      }
      if (tc.lr_grid.empty()) throw ConfigError("training.lr_grid: must not be empty");
    }
    tc.batch_size = t.get("batch_size", tc.batch_size);
    tc.rho = t.get("rho", tc.rho);
    tc.epsilon = t.get("epsilon", tc.epsilon);
    tc.lr_patience = t.get("lr_patience", tc.lr_patience);
    tc.stop_patience = t.get("stop_patience", tc.stop_patience);
    tc.max_epochs = t.get("max_epochs", tc.max_epochs);
    tc.seed = t.get("seed", tc.seed);
    tc.dropout = t.get("dropout", tc.dropout);
    tc.eval_batch_size = t.get("eval_batch_size", tc.eval_batch_size);
    t.finish();
    try {
      tc.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("training.") + e.what());
    }
  }

  if (top.has("output_dir")) c.output_dir = detail::resolve_path(base, top.require<std::string>("output_dir"));
  else c.output_dir = detail::resolve_path(base, c.output_dir.string());
  c.deterministic = top.get("deterministic", c.deterministic);
  c.workers = top.get("workers", c.workers);
  if (c.workers < 1) throw ConfigError("workers: must be >= 1");
  top.finish();
  return c;
}

inline RunConfig parse_config(const std::filesystem::path& path, bool check_paths = true) {
  nlohmann::json j;
  try {
    j = io::read_json(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return parse_config_json(j, std::filesystem::absolute(path).parent_path(), check_paths);
}

/// Every field written out explicitly, so a run can be repeated from this file alone.
inline nlohmann::json resolved_config_json(const RunConfig& c) {
  nlohmann::json data = {{"cube", c.cube.string()}, {"labels", c.labels.string()}, {"sidecar", c.sidecar.string()}};
  if (c.split_file) data["split"] = c.split_file->string();
  nlohmann::json split = {{"train_fraction", c.train_fraction}, {"val_fraction", c.val_fraction}};
  if (c.split_seed) split["seed"] = *c.split_seed;
  nlohmann::json model = {{"kernels", c.kernels}, {"standardize", c.standardize}};
  if (c.patch_size) model["patch_size"] = *c.patch_size;
  return {{"data", data},
          {"split", split},
          {"model", model},
          {"training", train_config_to_json(c.training)},
          {"output_dir", c.output_dir.string()},
          {"deterministic", c.deterministic},
          {"workers", c.workers}};
}

}  // namespace msrn
