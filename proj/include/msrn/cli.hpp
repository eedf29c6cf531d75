#pragma once

// Command-line front end shared by the msrn executable and the CLI tests.

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "msrn/checkpoint.hpp"
#include "msrn/config.hpp"
#include "msrn/data.hpp"
#include "msrn/evaluator.hpp"
#include "msrn/parallel.hpp"
#include "msrn/split.hpp"
#include "msrn/trainer.hpp"

namespace msrn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Everything loaded for a config-driven command.
struct Session {
  RunConfig config;
  HsiCube cube;
  LabelMap labels;
  ClassInfo info;
  SplitAssignment split;
  ModelSpec spec;
};

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& text, std::size_t expected, const std::string& flag) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream one(item);
    T v{};
    if (!(one >> v) || !(one >> std::ws).eof()) throw UsageError(flag + ": cannot parse '" + item + "'");
    out.push_back(v);
  }
  if (out.size() != expected) {
    throw UsageError(flag + ": expected " + std::to_string(expected) + " comma-separated values, got '" + text + "'");
  }
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

// Error output must stay on one line.
inline std::string one_line(std::string text) {
  for (char& ch : text) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return text;
}

inline SplitAssignment build_split(const RunConfig& c, const LabelMap& labels, std::size_t classes) {
  if (c.split_file) return import_split(*c.split_file, labels, c.effective_split_seed());
  return stratified_split(labels, c.train_fraction, c.val_fraction, c.effective_split_seed(), classes);
}

inline void write_run_record(const Session& s, const std::string& command, const std::vector<std::string>& args) {
  io::write_json(s.config.output_dir / "resolved_config.json", resolved_config_json(s.config));
  io::write_json(s.config.output_dir / ("run_" + command + ".json"),
                 {{"command", command},
                  {"arguments", args},
                  {"seeds", {{"training", s.config.training.seed}, {"split", s.config.effective_split_seed()}}},
                  {"model", model_spec_to_json(s.spec)},
                  {"split_totals", {{"train", s.split.train.size()}, {"val", s.split.val.size()}, {"test", s.split.test.size()}}}});
}

}  // namespace detail

/// Loads and cross-checks everything a config names, and fills in the
/// data-dependent defaults (class count, patch size).
inline Session open_session(const std::filesystem::path& config_path) {
  Session s;
  s.config = parse_config(config_path);
  s.config.split_seed = s.config.effective_split_seed();
  set_worker_count(static_cast<int>(s.config.workers));
  s.cube = load_cube(s.config.cube);
  s.cube.validate();
  s.labels = load_labels(s.config.labels, s.cube);
  s.info = load_class_info(s.config.sidecar);
  const std::size_t classes = s.info.names.size();
  check_labels(s.labels, classes);
  s.split = detail::build_split(s.config, s.labels, classes);
  if (!s.config.patch_size) s.config.patch_size = default_patch_size(s.cube.bands);
  s.spec.patch_size = *s.config.patch_size;
  s.spec.bands = s.cube.bands;
  s.spec.classes = classes;
  s.spec.kernels = s.config.kernels;
  s.spec.dropout = s.config.training.dropout;
  s.spec.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Subcommands

struct ConvertArgs {
  std::string raw, dims, out, kind = "cube";
};

inline void run_convert(const ConvertArgs& a, std::ostream& out) {
  const std::string raw = io::read_file(a.raw);
  if (a.kind == "cube") {
    const auto d = detail::parse_list<std::size_t>(a.dims, 3, "--dims");
    const HsiCube cube = cube_from_raw_bsq(raw, d[0], d[1], d[2]);
    save_cube(a.out, cube);
    out << "wrote cube " << d[0] << "x" << d[1] << "x" << d[2] << " to " << a.out << "\n";
  } else if (a.kind == "labels") {
    const auto d = detail::parse_list<std::size_t>(a.dims, 2, "--dims");
    const LabelMap labels = labels_from_raw(raw, d[0], d[1]);
    save_labels(a.out, labels);
    out << "wrote labels " << d[0] << "x" << d[1] << " (max class " << labels.max_label() << ") to " << a.out << "\n";
  } else {
    throw UsageError("--kind must be cube or labels, got '" + a.kind + "'");
  }
}

struct SplitArgs {
  std::string labels, fractions, import, out;
  std::optional<std::uint64_t> seed;
  std::size_t classes = 0;
};

inline void run_split(const SplitArgs& a, std::ostream& out) {
  const LabelMap labels = load_labels(a.labels);
  SplitAssignment split;
  if (!a.import.empty()) {
    if (!a.fractions.empty()) throw UsageError("--fractions and --import are mutually exclusive");
    split = import_split(a.import, labels, a.seed.value_or(0));
  } else {
    if (a.fractions.empty() || !a.seed) throw UsageError("split needs --fractions and --seed, or --import");
    const auto f = detail::parse_list<double>(a.fractions, 2, "--fractions");
    split = stratified_split(labels, f[0], f[1], *a.seed, a.classes);
  }
  save_split(a.out, split);
  out << "class  train    val   test\n";
  for (const auto& c : split.counts) {
    out << std::setw(5) << c.cls << std::setw(7) << c.train << std::setw(7) << c.val << std::setw(7) << c.test << "\n";
  }
  out << "total" << std::setw(7) << split.train.size() << std::setw(7) << split.val.size() << std::setw(7)
      << split.test.size() << "\n";
}

inline void print_epoch(std::ostream& out, const EpochRecord& e) {
  out << "epoch " << e.epoch << " train_loss=" << detail::format_double(e.train_loss)
      << " val_loss=" << detail::format_double(e.val_loss) << " val_oa=" << detail::format_double(e.val_oa)
      << " lr=" << detail::format_double(e.learning_rate) << std::endl;
}

inline void run_train(const std::string& config_path, const std::vector<std::string>& args, std::ostream& out) {
  Session s = open_session(config_path);
  detail::write_run_record(s, "train", args);
  save_split(s.config.output_dir / "split.json", s.split);
  out << "training " << s.split.train.size() << " / validating " << s.split.val.size() << " pixels, patch "
      << s.spec.patch_size << ", " << s.spec.classes << " classes" << std::endl;
  const TrainResult r = train_loop(s.spec, {s.cube, s.labels, s.split, s.config.standardize}, s.config.training,
                                   [&](const EpochRecord& e) { print_epoch(out, e); });
  save_checkpoint(s.config.output_dir / "checkpoint.msrn", r.checkpoint);
  io::write_json(s.config.output_dir / "history.json", history_to_json(r.history));
  out << "checkpoint from epoch " << r.history.checkpoint_epoch << " (val_oa="
      << detail::format_double(r.history.epochs[r.history.checkpoint_epoch].val_oa) << ") written to "
      << (s.config.output_dir / "checkpoint.msrn").string() << "\n";
}

inline void run_gridsearch(const std::string& config_path, const std::vector<std::string>& args, std::ostream& out) {
  Session s = open_session(config_path);
  detail::write_run_record(s, "gridsearch", args);
  const GridSearchResult g =
      lr_grid_search(s.spec, {s.cube, s.labels, s.split, s.config.standardize}, s.config.training,
                     [&](double lr, const EpochRecord& e) {
                       out << "lr=" << detail::format_double(lr) << " ";
                       print_epoch(out, e);
                     });
  io::write_json(s.config.output_dir / "grid.json", grid_to_json(g));
  out << "learning_rate  best_val_oa  epochs\n";
  for (const auto& e : g.entries) {
    out << std::setw(13) << detail::format_double(e.learning_rate) << std::setw(13)
        << detail::format_double(e.best_val_oa) << std::setw(8) << e.epochs_run << "\n";
  }
  out << "selected learning rate " << detail::format_double(g.selected_rate) << "\n";
}

inline void run_eval(const std::string& config_path, const std::string& checkpoint, const std::string& part_name_arg,
                     const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Part part = parse_part(part_name_arg);
  Session s = open_session(config_path);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  check_compatible(ckpt, s.cube);
  if (ckpt.spec().classes != s.spec.classes) {
    throw DimensionMismatchError("checkpoint has " + std::to_string(ckpt.spec().classes) + " classes, sidecar lists " +
                                 std::to_string(s.spec.classes));
  }
  s.spec = ckpt.spec();
  s.config.patch_size = ckpt.spec().patch_size;
  detail::write_run_record(s, std::string("eval_") + part_name(part), args);
  const Evaluation e =
      evaluate_split(ckpt, s.cube, s.labels, s.split, part, s.config.training.eval_batch_size);
  for (auto c : e.metrics.empty_classes) {
    err << "warning: class " << c + 1 << " has no " << part_name(part) << " samples; excluded from AA\n";
  }
  auto report = metrics_to_json(e.confusion, e.metrics, s.info.names);
  report["part"] = part_name(part);
  report["checkpoint"] = checkpoint;
  const auto path = s.config.output_dir / (std::string("metrics_") + part_name(part) + ".json");
  io::write_json(path, report);
  out << part_name(part) << ": OA=" << detail::format_double(e.metrics.overall_accuracy * 100.0)
      << "% AA=" << detail::format_double(e.metrics.average_accuracy * 100.0)
      << "% Kappa x100=" << detail::format_double(e.metrics.kappa * 100.0) << " (" << e.confusion.total()
      << " pixels) -> " << path.string() << "\n";
}

inline void run_map(const std::string& config_path, const std::string& checkpoint, bool mask, const std::string& out_path,
                    const std::vector<std::string>& args, std::ostream& out) {
  Session s = open_session(config_path);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  check_compatible(ckpt, s.cube);
  s.spec = ckpt.spec();
  s.config.patch_size = ckpt.spec().patch_size;
  detail::write_run_record(s, "map", args);
  render_map(out_path, ckpt, s.cube, s.labels, s.info, mask, s.config.training.eval_batch_size);
  out << "wrote " << s.cube.width << "x" << s.cube.height << " map to " << out_path << "\n";
}

// ---------------------------------------------------------------------------

/// Parses argv and runs one subcommand. Errors become a single line
/// "error[CODE]: message" on err; the return value is the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-scale residual network toolkit for hyperspectral image classification", "msrn"};
  app.require_subcommand(1);

  ConvertArgs convert;
  auto* c = app.add_subcommand("convert", "Convert headerless raw arrays to cube/label files");
  c->add_option("--raw", convert.raw, "raw input file")->required();
  c->add_option("--dims", convert.dims, "H,W,B for cubes or H,W for labels")->required();
  c->add_option("--out", convert.out, "output file")->required();
  c->add_option("--kind", convert.kind, "cube (float32 band-sequential) or labels (uint16)")
      ->check(CLI::IsMember({"cube", "labels"}));

  SplitArgs split;
  auto* sp = app.add_subcommand("split", "Create or import a train/val/test split");
  sp->add_option("--labels", split.labels, "label file")->required();
  auto* frac = sp->add_option("--fractions", split.fractions, "train,val fractions");
  auto* imp = sp->add_option("--import", split.import, "split file with per-class counts or pixel lists");
  frac->excludes(imp);
  sp->add_option("--seed", split.seed, "shuffle seed");
  sp->add_option("--classes", split.classes, "class count (default: largest label)");
  sp->add_option("--out", split.out, "output split file")->required();

  std::string config, checkpoint, part = "test", map_out;
  bool mask = false;
  auto* tr = app.add_subcommand("train", "Train a model and keep the best validation checkpoint");
  tr->add_option("--config", config, "run config (JSON)")->required();
  auto* gs = app.add_subcommand("gridsearch", "Train once per learning rate and pick the best");
  gs->add_option("--config", config, "run config (JSON)")->required();
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on one partition");
  ev->add_option("--config", config, "run config (JSON)")->required();
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--part", part, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  auto* mp = app.add_subcommand("map", "Render a classification map (binary PPM)");
  mp->add_option("--config", config, "run config (JSON)")->required();
  mp->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  mp->add_flag("--mask-unlabeled", mask, "paint unlabeled pixels black instead of predicting them");
  mp->add_option("--out", map_out, "output .ppm")->required();

  if (argc > 1 && argv[1][0] != '-' && !app.get_subcommand_no_throw(argv[1])) {
    err << "error[E_USAGE]: unknown subcommand '" << argv[1] << "'\n" << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error[E_USAGE]: " << detail::one_line(e.what()) << "\n" << app.help();
    return kExitUsage;
  }

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    if (*c) run_convert(convert, out);
    else if (*sp) run_split(split, out);
    else if (*tr) run_train(config, args, out);
    else if (*gs) run_gridsearch(config, args, out);
    else if (*ev) run_eval(config, checkpoint, part, args, out, err);
    else if (*mp) run_map(config, checkpoint, mask, map_out, args, out);
  } catch (const Error& e) {
    err << "error[" << e.code() << "]: " << detail::one_line(e.what()) << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error[E_INTERNAL]: " << detail::one_line(e.what()) << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace msrn::cli
