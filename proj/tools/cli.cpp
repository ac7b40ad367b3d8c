#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "nttlab/checkpoint.hpp"
#include "nttlab/error.hpp"
#include "nttlab/experiment.hpp"
#include "nttlab/netsim.hpp"
#include "nttlab/rng.hpp"
#include "nttlab/training.hpp"

namespace nttlab::cli {

namespace fs = std::filesystem;
using model::Task;
using model::Variant;

namespace {

const std::vector<std::string> kScenarios = {"PRETRAIN", "CASE1", "CASE2"};
const std::vector<std::string> kScales = {"PAPER", "DESK"};
const std::vector<std::string> kVariants = {"FULL", "NO_AGG", "FIXED_AGG", "NO_DELAY", "NO_SIZE"};
const std::vector<std::string> kTasks = {"DELAY", "LOG_MCT"};
const std::vector<std::string> kModes = {"DECODER_ONLY", "FULL"};

/// Checkpoint path that stands for a model predicting the true targets.
constexpr const char* kOracle = "ORACLE";

/// Every model window ends at or after this record index of its run, so
/// variants with shorter windows score the same targets as the full model.
std::size_t min_window_end() { return model::NTTConfig{}.window_length() - 1; }

std::string hash_json(const nlohmann::json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

nlohmann::json read_json_file(const std::string& path) {
  try {
    return nlohmann::json::parse(nn::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

std::shared_ptr<const trace::TraceDataset> load_split(const std::string& path, const std::string& split,
                                                      double test_fraction, std::optional<double> subsample,
                                                      std::uint64_t seed) {
  auto ds = experiment::read_trace_artifact(path);
  if (split == "all") return std::make_shared<const trace::TraceDataset>(std::move(ds));
  auto parts = trace::make_split(ds, test_fraction, subsample, derive_seed(seed, "split"));
  return std::make_shared<const trace::TraceDataset>(split == "train" ? std::move(parts.train)
                                                                      : std::move(parts.test));
}

/// Compares a checkpoint against a fresh build of `v`, naming the first
/// parameter whose shape differs.
void check_variant(const nn::Checkpoint& ckpt, Variant v) {
  auto [config, params] = model::build_variant(v, 0);
  const auto fresh = model::to_checkpoint(params, config, model::Normalizer::identity());
  for (const auto& a : fresh.arrays) {
    const auto it = std::find_if(ckpt.arrays.begin(), ckpt.arrays.end(),
                                 [&](const nn::NamedArray& b) { return b.name == a.name; });
    if (it == ckpt.arrays.end()) {
      throw ValidationError("checkpoint has no parameter " + a.name + " required by variant " + model::to_string(v));
    }
    if (it->value.shape() != a.value.shape()) {
      throw ValidationError("checkpoint is incompatible with variant " + model::to_string(v) + ": parameter " +
                            a.name + " has shape " + nn::shape_string(it->value.shape()) + ", variant expects " +
                            nn::shape_string(a.value.shape()));
    }
  }
  // A fine-tuned checkpoint may carry an MCT head; anything else extra means another variant.
  for (const auto& b : ckpt.arrays) {
    if (b.name.rfind("head.mct.", 0) == 0) continue;
    const auto it = std::find_if(fresh.arrays.begin(), fresh.arrays.end(),
                                 [&](const nn::NamedArray& a) { return a.name == b.name; });
    if (it == fresh.arrays.end()) {
      throw ValidationError("checkpoint parameter " + b.name + " " + nn::shape_string(b.value.shape()) +
                            " does not exist in variant " + model::to_string(v));
    }
  }
}

struct Commands {
  std::ostream& out;
  std::ostream& err;

  // simulate
  std::string sim_scenario = "PRETRAIN", sim_scale = "DESK", sim_out;
  std::uint64_t sim_seed = 1;

  // train
  std::string tr_mode, tr_variant = "FULL", tr_task = "DELAY", tr_data, tr_init, tr_out, tr_config, tr_ft_mode;
  std::optional<std::size_t> tr_epochs, tr_batch, tr_stride;
  std::optional<double> tr_lr, tr_subsample;
  std::uint64_t tr_seed = 1;
  double tr_test_fraction = 0.1;
  std::size_t tr_max_windows = 0;
  bool tr_quiet = false;

  // evaluate
  std::string ev_ckpt, ev_variant, ev_task = "DELAY", ev_data, ev_split = "test", ev_out;
  std::uint64_t ev_seed = 1;
  double ev_test_fraction = 0.1;
  bool ev_baselines = false;

  // gradcheck
  std::uint64_t gc_seed = 1;
  double gc_tolerance = 1e-4;

  // matrix
  std::string mx_plan, mx_out, mx_scale;
  std::vector<std::uint64_t> mx_seeds;
  std::vector<std::string> mx_variants, mx_tasks, mx_scenarios;
  std::optional<std::size_t> mx_pre_epochs, mx_ft_epochs, mx_max_windows;
  bool mx_no_artifacts = false, mx_quiet = false;

  // report
  std::string rp_matrix;
  bool rp_csv = false;

  int simulate() {
    const auto scenario = netsim::parse_scenario(sim_scenario);
    const auto cfg = netsim::build_scenario(scenario, netsim::parse_scale(sim_scale), sim_seed);
    const auto ds = netsim::run_simulation(cfg);
    const fs::path path(sim_out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    experiment::write_trace_artifact(ds, path);
    out << netsim::format_stats_line(netsim::trace_stats(ds)) << "\n";
    return 0;
  }

  training::TrainConfig train_config() const {
    training::TrainConfig tc;
    if (tr_mode == "finetune") tc.epochs = experiment::ExperimentPlan::default_finetune().epochs;
    if (!tr_config.empty()) {
      nlohmann::json j = tc;
      j.update(read_json_file(tr_config));
      tc = j.get<training::TrainConfig>();
    }
    if (tr_epochs) tc.epochs = *tr_epochs;
    if (tr_batch) tc.batch_size = *tr_batch;
    if (tr_stride) tc.window_stride = *tr_stride;
    if (tr_lr) tc.lr = *tr_lr;
    if (!tr_ft_mode.empty()) tc.finetune_mode = training::parse_finetune_mode(tr_ft_mode);
    tc.seed = derive_seed(tr_seed, "shuffle");
    training::validate(tc);
    return tc;
  }

  int train(const CLI::App& cmd) {
    const bool pretraining = tr_mode == "pretrain";
    const Task task = pretraining ? Task::DELAY : model::parse_task(tr_task);
    const auto tc = train_config();
    if (!pretraining && tc.finetune_mode == training::FinetuneMode::DECODER_ONLY && tr_init.empty()) {
      throw UsageError("DECODER_ONLY fine-tuning needs --init: there is no pre-trained body to freeze");
    }
    if (pretraining && tr_task != "DELAY") {
      throw UsageError("pre-training always uses the masked DELAY task");
    }
    const auto data = load_split(tr_data, "train", tr_test_fraction, tr_subsample, tr_seed);

    model::NTTConfig config;
    model::NTTParams params;
    model::Normalizer norm;
    nlohmann::json init_meta = nullptr;
    if (!tr_init.empty()) {
      const auto ckpt = nn::read_checkpoint(tr_init);
      if (cmd.count("--variant") > 0) check_variant(ckpt, model::parse_variant(tr_variant));
      auto loaded = model::from_checkpoint(ckpt);
      config = loaded.config;
      params = std::move(loaded.params);
      norm = loaded.normalizer;
      init_meta = loaded.meta;
    } else {
      auto built = model::build_variant(model::parse_variant(tr_variant), tr_seed);
      config = built.first;
      params = std::move(built.second);
      norm = training::fit_normalizer(*data, config.window_length(), tc.window_stride);
    }

    auto ws = training::make_windows(data, config.window_length(), tc.window_stride, task, min_window_end());
    if (tr_max_windows > 0 && ws.size() > tr_max_windows) {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < tr_max_windows; ++i) keep.push_back(i * ws.size() / tr_max_windows);
      ws = ws.subset(keep);
    }
    if (ws.size() == 0) throw ValidationError("no training windows in " + tr_data);
    const auto progress = [&](std::size_t epoch, double loss) {
      if (!tr_quiet) err << "epoch " << epoch << " loss " << loss << "\n";
    };
    auto result = pretraining ? training::pretrain(config, std::move(params), ws, norm, tc, progress)
                              : training::finetune(config, std::move(params), ws, task, norm, tc, progress);

    const nlohmann::json run = {{"mode", tr_mode},     {"task", model::to_string(task)},
                                {"train", tc},         {"data_config_hash", data->meta.config_hash},
                                {"data_seed", data->meta.seed}, {"init", tr_init},
                                {"test_fraction", tr_test_fraction}};
    nlohmann::json meta = {{"seed", tr_seed},
                           {"config_hash", hash_json({{"run", run}, {"model", config}})},
                           {"stage", tr_mode},
                           {"task", model::to_string(task)},
                           {"train", tc},
                           {"windows", ws.size()},
                           {"data", {{"path", tr_data}, {"config_hash", data->meta.config_hash}}}};
    if (!init_meta.is_null()) meta["init"] = init_meta;
    const fs::path path(tr_out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    experiment::write_model_artifact(path, result.params, config, norm, meta);
    auto loss_path = path;
    loss_path += ".loss.csv";
    training::write_loss_csv(loss_path, result.loss_curve);
    out << "wrote " << path.string() << " (" << ws.size() << " windows, " << tc.epochs << " epochs";
    if (!result.loss_curve.empty()) out << ", final loss " << result.loss_curve.back();
    out << ")\n";
    return 0;
  }

  int evaluate(const CLI::App& cmd) {
    const Task task = model::parse_task(ev_task);
    const auto data = load_split(ev_data, ev_split, ev_test_fraction, std::nullopt, ev_seed);
    const std::string dataset_label = fs::path(ev_data).filename().string() + "/" + ev_split;
    std::vector<training::EvalReport> reports;
    std::size_t length = model::NTTConfig{}.window_length();
    if (ev_ckpt == kOracle) {
      const auto ws = training::make_windows(data, length, 16, task, min_window_end());
      reports.push_back(training::score(training::targets(ws), ws, kOracle, dataset_label));
    } else {
      const auto ckpt = nn::read_checkpoint(ev_ckpt);
      if (cmd.count("--variant") > 0) check_variant(ckpt, model::parse_variant(ev_variant));
      auto loaded = model::from_checkpoint(ckpt);
      length = loaded.config.window_length();
      const auto ws = training::make_windows(data, length, 16, task, min_window_end());
      reports.push_back(
          training::evaluate(loaded.config, loaded.params, ws, loaded.normalizer, ev_ckpt, dataset_label));
      if (loaded.meta.contains("config_hash")) reports.back().provenance["config_hash"] = loaded.meta["config_hash"];
      if (loaded.meta.contains("seed")) reports.back().provenance["seed"] = loaded.meta["seed"];
    }
    if (ev_baselines) {
      // Baselines see the same targets; their history is the full window.
      const auto ws = training::make_windows(data, model::NTTConfig{}.window_length(), 16, task, min_window_end());
      for (auto kind : {model::BaselineKind::LAST_OBSERVED, model::BaselineKind::EWMA}) {
        reports.push_back(training::evaluate_baseline(kind, ws, dataset_label));
      }
    }
    for (auto& r : reports) {
      r.provenance["data_config_hash"] = data->meta.config_hash;
      r.provenance["split"] = ev_split;
      r.provenance["split_seed"] = ev_seed;
    }
    const auto jsonl = training::reports_to_jsonl(reports);
    out << jsonl;
    if (!ev_out.empty()) nn::write_file_atomic(ev_out, jsonl);
    return 0;
  }

  int gradcheck() {
    const auto r = model::gradcheck_tiny_ntt(gc_seed, gc_tolerance);
    const nlohmann::json j = {{"passed", r.passed()},
                              {"max_rel_error", r.max_rel_error},
                              {"tolerance", r.tolerance},
                              {"worst_parameter", r.worst_parameter},
                              {"worst_index", r.worst_index},
                              {"analytic", r.worst_analytic},
                              {"numeric", r.worst_numeric},
                              {"coordinates_checked", r.coordinates_checked}};
    out << j.dump() << "\n";
    return r.passed() ? 0 : 3;
  }

  int matrix() {
    experiment::ExperimentPlan plan;
    if (!mx_plan.empty()) plan = read_json_file(mx_plan).get<experiment::ExperimentPlan>();
    if (!mx_out.empty()) plan.output_dir = mx_out;
    if (!mx_scale.empty()) plan.scale = netsim::parse_scale(mx_scale);
    if (!mx_seeds.empty()) plan.seeds = mx_seeds;
    if (!mx_variants.empty()) {
      plan.variants.clear();
      for (const auto& v : mx_variants) plan.variants.push_back(model::parse_variant(v));
    }
    if (!mx_tasks.empty()) {
      plan.tasks.clear();
      for (const auto& t : mx_tasks) plan.tasks.push_back(model::parse_task(t));
    }
    if (!mx_scenarios.empty()) {
      plan.scenarios.clear();
      for (const auto& s : mx_scenarios) plan.scenarios.push_back(netsim::parse_scenario(s));
    }
    if (mx_pre_epochs) plan.pretrain.epochs = *mx_pre_epochs;
    if (mx_ft_epochs) plan.finetune.epochs = *mx_ft_epochs;
    if (mx_max_windows) plan.max_train_windows = *mx_max_windows;
    if (mx_no_artifacts) plan.write_artifacts = false;
    experiment::validate(plan);
    const auto result = experiment::run_experiment_matrix(plan, [&](const std::string& line) {
      if (!mx_quiet) err << line << "\n";
    });
    out << experiment::format_tables(result);
    std::size_t failed = 0;
    for (const auto& c : result.cells) failed += c.status == experiment::CellStatus::FAILED;
    out << result.cells.size() << " cells, " << failed << " failed";
    if (plan.write_artifacts) out << "; results in " << plan.output_dir;
    out << "\n";
    return 0;
  }

  int report() {
    const auto m = experiment::matrix_from_json(read_json_file(rp_matrix));
    out << (rp_csv ? experiment::matrix_to_csv(m) : experiment::format_tables(m));
    return 0;
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Network traffic transformer lab: simulate, train, evaluate"};
  app.name("nttlab");
  app.require_subcommand(1);
  Commands c{out, err};

  auto* sim = app.add_subcommand("simulate", "Generate a packet trace for one scenario");
  sim->add_option("--scenario", c.sim_scenario, "PRETRAIN, CASE1 or CASE2")->check(CLI::IsMember(kScenarios));
  sim->add_option("--scale", c.sim_scale, "PAPER or DESK")->check(CLI::IsMember(kScales));
  sim->add_option("--seed", c.sim_seed, "Simulation seed");
  sim->add_option("--out", c.sim_out, "Trace CSV path")->required();

  auto* train = app.add_subcommand("train", "Pre-train or fine-tune a model on a trace");
  train->add_option("--mode", c.tr_mode, "pretrain or finetune")
      ->required()
      ->check(CLI::IsMember({"pretrain", "finetune"}));
  train->add_option("--variant", c.tr_variant, "Model variant")->check(CLI::IsMember(kVariants));
  train->add_option("--task", c.tr_task, "DELAY or LOG_MCT (fine-tuning)")->check(CLI::IsMember(kTasks));
  train->add_option("--data", c.tr_data, "Trace CSV")->required();
  train->add_option("--init", c.tr_init, "Checkpoint to start from");
  train->add_option("--out", c.tr_out, "Checkpoint path")->required();
  train->add_option("--config", c.tr_config, "TrainConfig JSON; flags override its fields");
  train->add_option("--epochs", c.tr_epochs);
  train->add_option("--lr", c.tr_lr);
  train->add_option("--batch-size", c.tr_batch);
  train->add_option("--stride", c.tr_stride, "Window stride in packets");
  train->add_option("--finetune-mode", c.tr_ft_mode)->check(CLI::IsMember(kModes));
  train->add_option("--seed", c.tr_seed, "Seeds init, split and shuffling");
  train->add_option("--test-fraction", c.tr_test_fraction, "Share of runs held out for testing");
  train->add_option("--subsample", c.tr_subsample, "Train on this fraction of the training runs");
  train->add_option("--max-windows", c.tr_max_windows, "Evenly thin the training windows to at most N");
  train->add_flag("--quiet", c.tr_quiet, "No per-epoch progress");

  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on a trace split");
  eval->add_option("--checkpoint", c.ev_ckpt, "Checkpoint path, or ORACLE")->required();
  eval->add_option("--variant", c.ev_variant, "Fail unless the checkpoint fits this variant")
      ->check(CLI::IsMember(kVariants));
  eval->add_option("--task", c.ev_task)->check(CLI::IsMember(kTasks));
  eval->add_option("--data", c.ev_data, "Trace CSV")->required();
  eval->add_option("--split", c.ev_split, "test, train or all")->check(CLI::IsMember({"test", "train", "all"}));
  eval->add_option("--seed", c.ev_seed, "Split seed (same as the train --seed)");
  eval->add_option("--test-fraction", c.ev_test_fraction);
  eval->add_flag("--with-baselines", c.ev_baselines, "Add LAST_OBSERVED and EWMA rows");
  eval->add_option("--out", c.ev_out, "Also write the JSON lines here");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the tiny model");
  gc->add_option("--seed", c.gc_seed);
  gc->add_option("--tolerance", c.gc_tolerance);

  auto* mx = app.add_subcommand("matrix", "Run the full experiment matrix");
  mx->add_option("--plan", c.mx_plan, "ExperimentPlan JSON; flags override its fields");
  mx->add_option("--out", c.mx_out, "Output directory");
  mx->add_option("--scale", c.mx_scale)->check(CLI::IsMember(kScales));
  mx->add_option("--seeds", c.mx_seeds)->delimiter(',');
  mx->add_option("--variants", c.mx_variants)->delimiter(',')->check(CLI::IsMember(kVariants));
  mx->add_option("--tasks", c.mx_tasks)->delimiter(',')->check(CLI::IsMember(kTasks));
  mx->add_option("--scenarios", c.mx_scenarios)->delimiter(',')->check(CLI::IsMember(kScenarios));
  mx->add_option("--pretrain-epochs", c.mx_pre_epochs);
  mx->add_option("--finetune-epochs", c.mx_ft_epochs);
  mx->add_option("--max-train-windows", c.mx_max_windows);
  mx->add_flag("--no-artifacts", c.mx_no_artifacts, "Skip traces, checkpoints and result files");
  mx->add_flag("--quiet", c.mx_quiet);

  auto* rp = app.add_subcommand("report", "Render tables from a matrix.json");
  rp->add_option("--matrix", c.rp_matrix, "matrix.json written by `matrix`")->required();
  rp->add_flag("--csv", c.rp_csv, "Print the CSV table instead");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    if (sim->parsed()) return c.simulate();
    if (train->parsed()) return c.train(*train);
    if (eval->parsed()) return c.evaluate(*eval);
    if (gc->parsed()) return c.gradcheck();
    if (mx->parsed()) return c.matrix();
    if (rp->parsed()) return c.report();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace nttlab::cli
