#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "msrn/checkpoint.hpp"
#include "msrn/data.hpp"
#include "msrn/error.hpp"
#include "msrn/inference.hpp"
#include "msrn/model.hpp"
#include "msrn/split.hpp"

namespace msrn {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::vector<double> lr_grid{3e-3, 1e-3, 3e-4, 1e-4, 3e-5};
  std::size_t batch_size = 16;
  double rho = 0.9;
  double epsilon = 1e-7;
  std::size_t lr_patience = 5;
  std::size_t stop_patience = 15;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  double dropout = 0.3;
  std::size_t eval_batch_size = 64;

  static constexpr double kLrHalving = 0.5;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    for (double lr : lr_grid) {
      if (!(lr > 0.0)) throw ConfigError("lr_grid entries must be > 0");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("rho must lie in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (lr_patience < 1) throw ConfigError("lr_patience must be >= 1");
    if (stop_patience < 1) throw ConfigError("stop_patience must be >= 1");
    if (stop_patience < lr_patience) throw ConfigError("stop_patience must be >= lr_patience");
    if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
    check_dropout_probability(dropout);
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"lr_grid", c.lr_grid},     {"batch_size", c.batch_size},
          {"rho", c.rho},                     {"epsilon", c.epsilon},     {"lr_patience", c.lr_patience},
          {"stop_patience", c.stop_patience}, {"max_epochs", c.max_epochs}, {"seed", c.seed},
          {"dropout", c.dropout},             {"eval_batch_size", c.eval_batch_size}};
}

// ---------------------------------------------------------------------------
// RMSProp

/// s <- rho * s + (1 - rho) * g^2;  p <- p - lr * g / (sqrt(s) + eps)
inline void rmsprop_step(Tensor& param, const Tensor& grad, Tensor& accum, double lr, double rho, double eps) {
  require_shape(grad, param.shape(), "rmsprop gradient");
  require_shape(accum, param.shape(), "rmsprop accumulator");
  if (!grad.all_finite()) throw NumericError("non-finite gradient passed to rmsprop");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    accum[i] = rho * accum[i] + (1.0 - rho) * g * g;
    param[i] -= lr * g / (std::sqrt(accum[i]) + eps);
  }
}

/// Per-parameter accumulators for every trainable tensor, zero-initialised.
class RmspropState {
 public:
  RmspropState() = default;
  explicit RmspropState(const ModelParams& params) {
    params.visit([&](const std::string& name, const Tensor& t, bool trainable) {
      if (!trainable) return;
      names_.push_back(name);
      accum_.push_back(Tensor::zeros_like(t));
    });
  }

  void step(ModelParams& params, const GradientMap& grads, double lr, double rho, double eps) {
    std::size_t i = 0;
    params.visit([&](const std::string& name, Tensor& t, bool trainable) {
      if (!trainable) return;
      rmsprop_step(t, grads.at(name), accum_.at(i++), lr, rho, eps);
    });
  }

  const std::vector<Tensor>& accumulators() const noexcept { return accum_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> accum_;
};

// ---------------------------------------------------------------------------
// Schedules. "Improvement" means a strict decrease below the best validation
// loss seen so far; the first epoch always improves.

/// Halves the learning rate after `patience` consecutive non-improving epochs,
/// then starts counting again.
class PlateauSchedule {
 public:
  PlateauSchedule(double initial_lr, std::size_t patience) : lr_(initial_lr), patience_(patience) {
    if (patience < 1) throw ConfigError("lr_patience must be >= 1");
  }

  // Records a completed epoch; returns the rate for the next one.
  double observe(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      stale_ = 0;
    } else if (++stale_ >= patience_) {
      lr_ *= TrainConfig::kLrHalving;
      stale_ = 0;
      ++halvings_;
    }
    return lr_;
  }

  double lr() const noexcept { return lr_; }
  std::size_t halvings() const noexcept { return halvings_; }

 private:
  double lr_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  std::size_t halvings_ = 0;
};

/// Learning rate in effect for each epoch of a validation-loss trace; entry
/// e + 1 is the rate after epoch e completed, so the result has one more entry
/// than the trace.
inline std::vector<double> lr_plateau_schedule(std::span<const double> val_losses, double initial_lr,
                                               std::size_t lr_patience) {
  PlateauSchedule schedule(initial_lr, lr_patience);
  std::vector<double> out{initial_lr};
  for (double loss : val_losses) out.push_back(schedule.observe(loss));
  return out;
}

enum class StopDecision { Continue, Stop };

class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("stop_patience must be >= 1");
  }

  StopDecision observe(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return stale_ >= patience_ ? StopDecision::Stop : StopDecision::Continue;
  }

  std::size_t stale_epochs() const noexcept { return stale_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
};

/// Decision after the last epoch of a validation-loss trace.
inline StopDecision early_stop_check(std::span<const double> val_losses, std::size_t stop_patience) {
  if (val_losses.empty()) throw UsageError("early_stop_check needs at least one completed epoch");
  EarlyStopper stopper(stop_patience);
  StopDecision d = StopDecision::Continue;
  for (double loss : val_losses) d = stopper.observe(loss);
  return d;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_oa = 0.0;
  double learning_rate = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;        // lowest validation loss, earliest on ties
  std::size_t checkpoint_epoch = 0;  // highest validation OA, earliest on ties
  bool stopped_early = false;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

inline nlohmann::json history_to_json(const TrainHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss},
                      {"val_oa", e.val_oa},
                      {"learning_rate", e.learning_rate}});
  }
  return {{"epochs", epochs},
          {"best_epoch", h.best_epoch},
          {"checkpoint_epoch", h.checkpoint_epoch},
          {"stopped_early", h.stopped_early}};
}

/// Inputs to a training run. Standardization statistics are fitted on the
/// training pixels of `split` only.
struct TrainingData {
  const HsiCube& cube;
  const LabelMap& labels;
  const SplitAssignment& split;
  bool standardize = true;
};

struct TrainResult {
  Checkpoint checkpoint;  // best validation OA, never simply the last epoch
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

inline std::vector<std::uint16_t> labels_of(const LabelMap& labels, std::span<const std::uint32_t> pixels) {
  std::vector<std::uint16_t> out;
  out.reserve(pixels.size());
  for (auto p : pixels) out.push_back(labels.labels[p]);
  return out;
}

struct ValidationResult {
  double loss = 0.0;
  double oa = 0.0;
};

inline ValidationResult validate_model(const MsrnModel& model, const HsiCube& prepared, const LabelMap& labels,
                                       std::span<const std::uint32_t> pixels, std::size_t batch_size) {
  const Tensor logits = pixel_logits(model, prepared, pixels, batch_size);
  const auto truth = labels_of(labels, pixels);
  const auto pred = argmax_classes(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += truth[i] == pred[i];
  return {mean_cross_entropy(logits, truth), static_cast<double>(correct) / static_cast<double>(truth.size())};
}

}  // namespace detail

inline TrainResult train_loop(const ModelSpec& spec, const TrainingData& data, const TrainConfig& config,
                              const EpochCallback& on_epoch = {}) {
  config.validate();
  spec.validate();
  if (config.max_epochs == 0) throw ConfigError("max_epochs must be >= 1; no epoch would complete to checkpoint");
  check_pairing(data.cube, data.labels);
  if (spec.bands != data.cube.bands) {
    throw DimensionMismatchError("model expects " + std::to_string(spec.bands) + " bands, cube has " +
                                 std::to_string(data.cube.bands));
  }
  check_labels(data.labels, spec.classes);
  if (data.split.train.empty() || data.split.val.empty()) {
    throw DataError("training needs non-empty train and val partitions");
  }

  Checkpoint best;
  HsiCube prepared = data.cube;
  if (data.standardize) {
    best.standardization = fit_band_stats(data.cube, data.split.train);
    prepared = standardize(data.cube, *best.standardization);
  }

  Rng init_rng(derive_seed(config.seed, 0x1417));
  MsrnModel model = build_msrn(spec, init_rng);
  RmspropState optimizer(model.params());
  PlateauSchedule schedule(config.learning_rate, config.lr_patience);
  EarlyStopper stopper(config.stop_patience);

  TrainHistory history;
  double best_oa = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  EpochRecord best_record;

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = schedule.lr();
    const auto batches = make_batches(data.split.train, config.batch_size, config.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      try {
        const Tensor x = gather_patches(prepared, batches[b], spec.patch_size);
        std::vector<std::size_t> targets;
        for (auto p : batches[b]) targets.push_back(data.labels.labels[p] - 1u);
        Rng dropout_rng(derive_seed(config.seed, 0xd409, epoch, b));
        Tape tape;
        Var logits = model.forward(tape, x, Mode::Train, &dropout_rng);
        Var loss = softmax_cross_entropy(tape, logits, targets).loss;
        loss_sum += tape.value(loss)[0] * static_cast<double>(batches[b].size());
        optimizer.step(model.params(), tape.backward(loss), lr, config.rho, config.epsilon);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " + e.what());
      }
    }

    const auto val = detail::validate_model(model, prepared, data.labels, data.split.val, config.eval_batch_size);
    EpochRecord record{epoch, loss_sum / static_cast<double>(data.split.train.size()), val.loss, val.oa, lr};
    history.epochs.push_back(record);
    if (on_epoch) on_epoch(record);

    if (val.loss < best_loss) {
      best_loss = val.loss;
      history.best_epoch = epoch;
    }
    if (val.oa > best_oa) {
      best_oa = val.oa;
      best.model = model;
      best_record = record;
      history.checkpoint_epoch = epoch;
    }
    schedule.observe(val.loss);
    if (stopper.observe(val.loss) == StopDecision::Stop) {
      history.stopped_early = true;
      break;
    }
  }

  best.training = {{"epoch", best_record.epoch},
                   {"val_oa", best_record.val_oa},
                   {"val_loss", best_record.val_loss},
                   {"train_loss", best_record.train_loss},
                   {"learning_rate", best_record.learning_rate},
                   {"epochs_run", history.epochs.size()},
                   {"stopped_early", history.stopped_early},
                   {"optimizer", {{"name", "rmsprop"}, {"rho", config.rho}, {"epsilon", config.epsilon}}},
                   {"config", train_config_to_json(config)},
                   {"split", {{"seed", data.split.seed},
                              {"train", data.split.train.size()},
                              {"val", data.split.val.size()},
                              {"test", data.split.test.size()}}}};
  return TrainResult{std::move(best), std::move(history)};
}

// ---------------------------------------------------------------------------
// Learning-rate grid search

struct GridEntry {
  double learning_rate = 0.0;
  double best_val_oa = 0.0;
  double best_val_loss = 0.0;
  std::size_t epochs_run = 0;
  std::size_t checkpoint_epoch = 0;
};

struct GridSearchResult {
  std::vector<GridEntry> entries;
  double selected_rate = 0.0;
  std::size_t selected_index = 0;
};

/// Highest validation OA wins; ties go to the smaller rate.
inline std::size_t select_learning_rate(std::span<const GridEntry> entries) {
  if (entries.empty()) throw ConfigError("learning-rate grid is empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto& b = entries[best];
    if (e.best_val_oa > b.best_val_oa || (e.best_val_oa == b.best_val_oa && e.learning_rate < b.learning_rate)) {
      best = i;
    }
  }
  return best;
}

/// One complete train/validate run per rate with the shared seed.
inline GridSearchResult lr_grid_search(const ModelSpec& spec, const TrainingData& data, const TrainConfig& config,
                                       const std::function<void(double, const EpochRecord&)>& on_epoch = {}) {
  if (config.lr_grid.empty()) throw ConfigError("learning-rate grid is empty");
  GridSearchResult result;
  for (double lr : config.lr_grid) {
    TrainConfig run = config;
    run.learning_rate = lr;
    try {
      const TrainResult r = train_loop(spec, data, run, [&](const EpochRecord& e) {
        if (on_epoch) on_epoch(lr, e);
      });
      const auto& ck = r.history.epochs[r.history.checkpoint_epoch];
      result.entries.push_back({lr, ck.val_oa, r.history.epochs[r.history.best_epoch].val_loss, r.history.epochs.size(),
                                r.history.checkpoint_epoch});
    } catch (const Error& e) {
      std::ostringstream os;
      os << "learning rate " << lr << ": " << e.what();
      throw Error(e.code(), os.str());
    }
  }
  result.selected_index = select_learning_rate(result.entries);
  result.selected_rate = result.entries[result.selected_index].learning_rate;
  return result;
}

inline nlohmann::json grid_to_json(const GridSearchResult& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : g.entries) {
    rows.push_back({{"learning_rate", e.learning_rate},
                    {"best_val_oa", e.best_val_oa},
                    {"best_val_loss", e.best_val_loss},
                    {"epochs_run", e.epochs_run},
                    {"checkpoint_epoch", e.checkpoint_epoch}});
  }
  return {{"results", rows}, {"selected_learning_rate", g.selected_rate}};
}

}  // namespace msrn
