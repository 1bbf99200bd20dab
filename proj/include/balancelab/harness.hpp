#pragma once

// Config-driven experiment runner: parse a config, run every (method, seed,
// sweep value) cell, and emit CSV/JSON reports and comparison tables.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "balancelab/datagen.hpp"
#include "balancelab/fusion.hpp"
#include "balancelab/methods.hpp"
#include "balancelab/metrics.hpp"
#include "balancelab/trainer.hpp"

namespace balancelab {

inline constexpr const char* kToolVersion = "0.1.0";

struct ExperimentConfig {
  std::optional<SyntheticSpec> synthetic;   // exactly one of these two is set
  std::optional<std::string> dataset_path;
  SplitFractions split;
  std::vector<std::size_t> hidden{32};
  std::size_t feature_dim = 16;
  TrainConfig train;
  MethodSpec method;
  bool shapley = true;
  std::string output_dir;                   // empty: nothing written
  std::uint64_t master_seed = 0;
  std::vector<std::uint64_t> seeds{0};
  std::string sweep_param;                  // e.g. "method.alpha"; empty when not sweeping
  std::vector<double> sweep_values;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Strict parse of the dotted-key config text. Unknown keys, type mismatches
/// and missing required keys (`method.kind`, some `dataset.*`) raise ParseError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig parse_config_file(const std::filesystem::path& path);
/// Every key, in documented order; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& config);

/// Applies the documented seed precedence: flag > BALANCELAB_SEED > config.
void apply_seed_overrides(ExperimentConfig& config, std::optional<std::uint64_t> master_flag,
                          const char* env_value, std::optional<std::vector<std::uint64_t>> seeds_flag);

/// Seeds of one run, all derived from (master seed, seed value).
struct RunSeeds {
  std::uint64_t split;
  std::uint64_t init;
  std::uint64_t train;
};
RunSeeds derive_run_seeds(std::uint64_t master_seed, std::uint64_t seed);

/// Loads or generates the configured dataset.
Dataset load_dataset(const ExperimentConfig& config);

struct CellResult {
  std::string method;
  std::uint64_t seed = 0;
  std::optional<double> sweep_value;
  PerfReport perf;
  std::optional<ShapleyReport> shapley;
  std::uint64_t flops_total = 0;
  std::size_t best_epoch = 0;
  FusionModel model;
  TrainLog log;
};

/// One seeded run: split, init, fit with the configured method, evaluate on test.
CellResult run_cell(const ExperimentConfig& config, const Dataset& data, std::uint64_t seed);

/// Test accuracy of a single-modality model trained on `modality` alone with the
/// same split, training budget and seed as run_cell.
double unimodal_accuracy(const ExperimentConfig& config, const Dataset& data, std::uint64_t seed,
                         std::size_t modality);

enum class RowKind { Seed, Mean, Std };

struct RunRow {
  std::string method;
  RowKind kind = RowKind::Seed;
  std::uint64_t seed = 0;                 // RowKind::Seed only
  std::string sweep_param;
  std::optional<double> sweep_value;
  double acc = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> phi;                // empty when Shapley evaluation is off
  std::optional<double> imbalance;
  double flops_total = 0.0;
  double best_epoch = 0.0;
  std::string marker;                     // sweep markers on Mean rows

  friend bool operator==(const RunRow&, const RunRow&) = default;
};

struct CellFailure {
  std::string method;
  std::uint64_t seed = 0;
  std::optional<double> sweep_value;
  std::string message;
};

struct RunReport {
  ExperimentConfig config;
  std::size_t modalities = 0;
  std::vector<RunRow> rows;               // per-seed rows, then aggregates per (method, value)
  std::vector<CellFailure> failures;

  bool all_failed() const { return !failures.empty() && rows.empty(); }
};

inline constexpr const char* kMarkerAbsolute = "absolute_balance";  // argmin mean imbalance
inline constexpr const char* kMarkerRelative = "relative_balance";  // argmax mean accuracy

struct RunOptions {
  std::size_t jobs = 1;
  bool keep_artifacts = true;  // checkpoints and training logs per cell, when output_dir is set
};

/// Runs every seed of the configured method. Cells already completed under
/// output_dir with an identical config are reused rather than recomputed.
RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// One run_experiment per value of `param` (a numeric `method.*` key).
RunReport run_sweep(const ExperimentConfig& config, const std::string& param, const std::vector<double>& values,
                    const RunOptions& options = {});

/// method,seed,sweep_param,sweep_value,acc,macro_f1,phi_1..phi_m,imbalance,flops_total,best_epoch,marker
std::string report_csv(const RunReport& report);
std::string report_json(const RunReport& report);
RunReport report_from_json(const std::string& text);
/// Writes report.csv and report.json into `dir`.
void write_report(const RunReport& report, const std::filesystem::path& dir);

struct ComparisonTable {
  std::string text;
  std::string csv;
};

/// One row per method (Baseline, then Objective, Optimization, Feed-forward,
/// Data), columns ACC, F1, imbalance, FLOPs; best and second best marked.
/// Throws InvalidArgument if the reports disagree on the dataset.
ComparisonTable compare_table(const std::vector<RunReport>& reports);

/// Shortest decimal that round-trips.
std::string format_number(double v);

}  // namespace balancelab
