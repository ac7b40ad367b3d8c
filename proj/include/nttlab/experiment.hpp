#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nttlab/model.hpp"
#include "nttlab/netsim.hpp"
#include "nttlab/training.hpp"

namespace nttlab::experiment {

struct ExperimentPlan {
  netsim::Scale scale = netsim::Scale::DESK;
  std::vector<netsim::Scenario> scenarios = {netsim::Scenario::PRETRAIN, netsim::Scenario::CASE1,
                                             netsim::Scenario::CASE2};
  std::vector<model::Variant> variants = {std::begin(model::kAllVariants), std::end(model::kAllVariants)};
  std::vector<model::Task> tasks = {model::Task::DELAY, model::Task::LOG_MCT};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string output_dir = "nttlab-out";
  training::TrainConfig pretrain = default_pretrain();
  training::TrainConfig finetune = default_finetune();
  double test_fraction = 0.1;
  double finetune_fraction = 0.1;
  /// Caps every training window set (evenly spaced subset); 0 keeps all.
  std::size_t max_train_windows = 0;
  bool write_artifacts = true;
  model::NTTConfig model;

  static training::TrainConfig default_pretrain() {
    training::TrainConfig c;
    c.epochs = 20;
    return c;
  }
  static training::TrainConfig default_finetune() {
    training::TrainConfig c;
    c.epochs = 10;
    return c;
  }
};

void to_json(nlohmann::json& j, const ExperimentPlan& p);
void from_json(const nlohmann::json& j, ExperimentPlan& p);
void validate(const ExperimentPlan& p);
std::string plan_hash(const ExperimentPlan& p);

enum class CellStatus { OK, FAILED, NOT_APPLICABLE };

std::string to_string(CellStatus s);

struct Cell {
  std::string table;  // "table1", "table2", "table3"
  std::string row;
  std::string column;
  std::uint64_t seed = 0;
  CellStatus status = CellStatus::OK;
  double mse = 0.0;
  std::size_t n_examples = 0;
  std::string cause;
  std::string config_hash;
  std::string detail;  // e.g. layers trained
  double train_seconds = 0.0;  // wall clock, excluded from the CSV
};

struct MatrixResult {
  std::vector<Cell> cells;
  std::vector<training::EvalReport> reports;

  const Cell* find(const std::string& table, const std::string& row, const std::string& column,
                   std::uint64_t seed) const;
};

using LogFn = std::function<void(const std::string&)>;

/// Runs simulate -> pretrain -> fine-tune -> evaluate for every seed. A
/// failing stage marks the cells depending on it FAILED and the rest of
/// the matrix continues.
MatrixResult run_experiment_matrix(const ExperimentPlan& plan, const LogFn& log = {});

/// Deterministic numeric table: one line per cell, no timings.
std::string matrix_to_csv(const MatrixResult& m);
nlohmann::json matrix_to_json(const MatrixResult& m, const ExperimentPlan& plan);
/// Human-readable tables, mean over OK seeds per cell.
std::string format_tables(const MatrixResult& m);
MatrixResult matrix_from_json(const nlohmann::json& j);

inline const std::vector<std::string>& table1_rows() {
  static const std::vector<std::string> rows = {"Pre-trained",    "From scratch",      "Last observed",
                                                "EWMA",           "No aggregation",    "Fixed aggregation",
                                                "Without packet size", "Without delay"};
  return rows;
}
inline const std::vector<std::string>& table1_columns() {
  static const std::vector<std::string> cols = {"pretrain_delay", "finetune_delay", "finetune_log_mct"};
  return cols;
}
inline const std::vector<std::string>& table23_rows() {
  static const std::vector<std::string> rows = {"Pre-trained/full", "Pre-trained/10%", "From scratch/full",
                                                "From scratch/10%"};
  return rows;
}

/// Trace CSV plus `<path>.meta.json` carrying scenario, seed, generator
/// version and config hash.
void write_trace_artifact(const trace::TraceDataset& ds, const std::filesystem::path& path);
trace::TraceDataset read_trace_artifact(const std::filesystem::path& path);

/// Checkpoint plus `<path>.config.json` holding the model config and meta.
void write_model_artifact(const std::filesystem::path& path, model::NTTParams& params,
                          const model::NTTConfig& config, const model::Normalizer& norm, const nlohmann::json& meta);

}  // namespace nttlab::experiment
