#include "nttlab/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>

#include "nttlab/checkpoint.hpp"
#include "nttlab/error.hpp"
#include "nttlab/rng.hpp"

namespace nttlab::experiment {

namespace fs = std::filesystem;
using model::Task;
using model::Variant;
using netsim::Scenario;

void to_json(nlohmann::json& j, const ExperimentPlan& p) {
  std::vector<std::string> scenarios, variants, tasks;
  for (auto s : p.scenarios) scenarios.push_back(netsim::to_string(s));
  for (auto v : p.variants) variants.push_back(model::to_string(v));
  for (auto t : p.tasks) tasks.push_back(model::to_string(t));
  j = {{"scale", netsim::to_string(p.scale)},
       {"scenarios", scenarios},
       {"variants", variants},
       {"tasks", tasks},
       {"seeds", p.seeds},
       {"output_dir", p.output_dir},
       {"pretrain", p.pretrain},
       {"finetune", p.finetune},
       {"test_fraction", p.test_fraction},
       {"finetune_fraction", p.finetune_fraction},
       {"max_train_windows", p.max_train_windows},
       {"write_artifacts", p.write_artifacts},
       {"model", p.model}};
}

void from_json(const nlohmann::json& j, ExperimentPlan& p) {
  try {
    if (j.contains("scale")) p.scale = netsim::parse_scale(j.at("scale").get<std::string>());
    if (j.contains("scenarios")) {
      p.scenarios.clear();
      for (const auto& s : j.at("scenarios")) p.scenarios.push_back(netsim::parse_scenario(s.get<std::string>()));
    }
    if (j.contains("variants")) {
      p.variants.clear();
      for (const auto& v : j.at("variants")) p.variants.push_back(model::parse_variant(v.get<std::string>()));
    }
    if (j.contains("tasks")) {
      p.tasks.clear();
      for (const auto& t : j.at("tasks")) p.tasks.push_back(model::parse_task(t.get<std::string>()));
    }
    if (j.contains("seeds")) p.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    p.output_dir = j.value("output_dir", p.output_dir);
    if (j.contains("pretrain")) {
      training::TrainConfig base = p.pretrain;
      nlohmann::json merged = base;
      merged.update(j.at("pretrain"));
      p.pretrain = merged.get<training::TrainConfig>();
    }
    if (j.contains("finetune")) {
      training::TrainConfig base = p.finetune;
      nlohmann::json merged = base;
      merged.update(j.at("finetune"));
      p.finetune = merged.get<training::TrainConfig>();
    }
    p.test_fraction = j.value("test_fraction", p.test_fraction);
    p.finetune_fraction = j.value("finetune_fraction", p.finetune_fraction);
    p.max_train_windows = j.value("max_train_windows", p.max_train_windows);
    p.write_artifacts = j.value("write_artifacts", p.write_artifacts);
    if (j.contains("model")) p.model = j.at("model").get<model::NTTConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment plan: ") + e.what());
  }
  validate(p);
}

void validate(const ExperimentPlan& p) {
  if (p.seeds.empty()) throw ConfigError("experiment plan needs at least one seed");
  if (p.scenarios.empty()) throw ConfigError("experiment plan needs at least one scenario");
  if (!(p.test_fraction > 0.0 && p.test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0, 1)");
  if (!(p.finetune_fraction > 0.0 && p.finetune_fraction <= 1.0)) {
    throw ConfigError("finetune_fraction must be in (0, 1]");
  }
  training::validate(p.pretrain);
  training::validate(p.finetune);
  model::validate(p.model);
}

std::string plan_hash(const ExperimentPlan& p) {
  nlohmann::json j = p;
  j.erase("output_dir");
  j.erase("write_artifacts");
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

std::string to_string(CellStatus s) {
  switch (s) {
    case CellStatus::OK: return "OK";
    case CellStatus::FAILED: return "FAILED";
    case CellStatus::NOT_APPLICABLE: return "N/A";
  }
  return "?";
}

const Cell* MatrixResult::find(const std::string& table, const std::string& row, const std::string& column,
                               std::uint64_t seed) const {
  for (const auto& c : cells) {
    if (c.table == table && c.row == row && c.column == column && c.seed == seed) return &c;
  }
  return nullptr;
}

void write_trace_artifact(const trace::TraceDataset& ds, const fs::path& path) {
  trace::write_trace_file(ds, path.string());
  const nlohmann::json meta = {{"scenario", ds.meta.scenario},
                               {"seed", ds.meta.seed},
                               {"generator_version", ds.meta.generator_version},
                               {"config_hash", ds.meta.config_hash},
                               {"packets", ds.size()}};
  auto meta_path = path;
  meta_path += ".meta.json";
  nn::write_file_atomic(meta_path, meta.dump(2) + "\n");
}

trace::TraceDataset read_trace_artifact(const fs::path& path) {
  auto ds = trace::read_trace_file(path.string());
  auto meta_path = path;
  meta_path += ".meta.json";
  if (fs::exists(meta_path)) {
    try {
      const auto meta = nlohmann::json::parse(nn::read_file(meta_path));
      ds.meta.scenario = meta.value("scenario", std::string());
      ds.meta.seed = meta.value("seed", std::uint64_t{0});
      ds.meta.generator_version = meta.value("generator_version", std::string());
      ds.meta.config_hash = meta.value("config_hash", std::string());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad trace metadata " + meta_path.string() + ": " + e.what());
    }
  }
  return ds;
}

void write_model_artifact(const fs::path& path, model::NTTParams& params, const model::NTTConfig& config,
                          const model::Normalizer& norm, const nlohmann::json& meta) {
  nn::write_checkpoint(path, model::to_checkpoint(params, config, norm, meta));
  nlohmann::json side = meta;
  side["config"] = config;
  side["normalizer"] = norm;
  auto side_path = path;
  side_path += ".config.json";
  nn::write_file_atomic(side_path, side.dump(2) + "\n");
}

namespace {

/// Raised when a stage cannot run because an input stage failed.
class DependencyFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Stage {
  std::optional<T> value;
  std::string error;

  const T& get() const {
    if (!value) throw DependencyFailure(error);
    return *value;
  }
};

template <typename T, typename F>
Stage<T> attempt(const std::string& name, const LogFn& log, F&& f) {
  Stage<T> s;
  try {
    s.value.emplace(f());
  } catch (const DependencyFailure& e) {
    s.error = e.what();
  } catch (const std::exception& e) {
    s.error = name + ": " + e.what();
    if (log) log("FAILED " + s.error);
  }
  return s;
}

struct ScenarioData {
  std::shared_ptr<const trace::TraceDataset> train;
  std::shared_ptr<const trace::TraceDataset> subset;
  std::shared_ptr<const trace::TraceDataset> test;
};

struct Trained {
  model::NTTConfig config;
  model::NTTParams params;
};

struct Scored {
  training::EvalReport report;
  std::string detail;
  double seconds = 0.0;
};

std::string variant_row(Variant v) {
  switch (v) {
    case Variant::FULL: return "Pre-trained";
    case Variant::NO_AGG: return "No aggregation";
    case Variant::FIXED_AGG: return "Fixed aggregation";
    case Variant::NO_SIZE: return "Without packet size";
    case Variant::NO_DELAY: return "Without delay";
  }
  return "?";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

class SeedRun {
 public:
  SeedRun(const ExperimentPlan& plan, std::uint64_t seed, const LogFn& log, MatrixResult& out)
      : plan_(plan), seed_(seed), log_(log), out_(out), plan_hash_(plan_hash(plan)) {
    dir_ = fs::path(plan.output_dir) / ("seed-" + std::to_string(seed));
  }

  void run() {
    if (plan_.write_artifacts) {
      fs::create_directories(dir_ / "traces");
      fs::create_directories(dir_ / "checkpoints");
    }
    for (auto s : plan_.scenarios) data_[s] = attempt<ScenarioData>("simulate " + netsim::to_string(s), log_, [&] {
      return simulate(s);
    });
    norm_ = attempt<model::Normalizer>("normalizer", log_, [&] {
      return training::fit_normalizer(*scenario(Scenario::PRETRAIN).train, plan_.model.window_length(),
                                      plan_.pretrain.window_stride);
    });
    for (auto v : plan_.variants) pretrained_[v] = attempt<Trained>("pretrain " + model::to_string(v), log_, [&] {
      return pretrain(v);
    });
    table1();
    for (auto [table, scn] : {std::pair{"table2", Scenario::CASE1}, std::pair{"table3", Scenario::CASE2}}) {
      table23(table, scn);
    }
  }

 private:
  const ScenarioData& scenario(Scenario s) {
    auto it = data_.find(s);
    if (it == data_.end()) throw DependencyFailure("scenario " + netsim::to_string(s) + " is not in the plan");
    return it->second.get();
  }

  bool has_task(Task t) const {
    for (auto x : plan_.tasks) {
      if (x == t) return true;
    }
    return false;
  }

  bool has_variant(Variant v) const { return pretrained_.count(v) > 0; }

  ScenarioData simulate(Scenario s) {
    const auto name = netsim::to_string(s);
    auto cfg = netsim::build_scenario(s, plan_.scale, derive_seed(seed_, "simulate/" + name));
    auto ds = netsim::run_simulation(cfg);
    if (log_) log_("seed " + std::to_string(seed_) + " simulated " + name + ": " + std::to_string(ds.size()) + " packets");
    if (plan_.write_artifacts) write_trace_artifact(ds, dir_ / "traces" / (name + ".csv"));
    const auto split_seed = derive_seed(seed_, "split/" + name);
    auto full = trace::make_split(ds, plan_.test_fraction, std::nullopt, split_seed);
    ScenarioData d;
    d.train = std::make_shared<const trace::TraceDataset>(std::move(full.train));
    d.test = std::make_shared<const trace::TraceDataset>(std::move(full.test));
    if (s != Scenario::PRETRAIN) {
      auto sub = trace::make_split(ds, plan_.test_fraction, plan_.finetune_fraction, split_seed);
      d.subset = std::make_shared<const trace::TraceDataset>(std::move(sub.train));
    } else {
      d.subset = d.train;
    }
    return d;
  }

  training::WindowSet windows(const std::shared_ptr<const trace::TraceDataset>& ds, std::size_t length, Task task,
                              bool cap) {
    auto ws = training::make_windows(ds, length, plan_.pretrain.window_stride, task, plan_.model.window_length() - 1);
    if (cap && plan_.max_train_windows > 0 && ws.size() > plan_.max_train_windows) {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < plan_.max_train_windows; ++i) keep.push_back(i * ws.size() / plan_.max_train_windows);
      ws = ws.subset(keep);
    }
    return ws;
  }

  nlohmann::json artifact_meta(const std::string& stage) const {
    return {{"seed", seed_}, {"plan_hash", plan_hash_}, {"stage", stage}};
  }

  Trained pretrain(Variant v) {
    const auto& pre = scenario(Scenario::PRETRAIN);
    const auto& norm = norm_.get();
    auto [config, params] = model::build_variant(v, seed_, plan_.model);
    auto tc = plan_.pretrain;
    tc.seed = derive_seed(seed_, "shuffle/pretrain/" + model::to_string(v));
    const auto ws = windows(pre.train, config.window_length(), Task::DELAY, true);
    const auto t0 = std::chrono::steady_clock::now();
    auto result = training::pretrain(config, std::move(params), ws, norm, tc, [&](std::size_t e, double loss) {
      if (log_) {
        std::ostringstream msg;
        msg << "seed " << seed_ << " pretrain " << model::to_string(v) << " epoch " << e << " loss " << loss;
        log_(msg.str());
      }
    });
    pretrain_seconds_[v] = seconds_since(t0);
    if (plan_.write_artifacts) {
      const auto name = "pretrain-" + model::to_string(v);
      write_model_artifact(dir_ / "checkpoints" / (name + ".ckpt"), result.params, config, norm,
                           artifact_meta(name));
      training::write_loss_csv(dir_ / "checkpoints" / (name + ".loss.csv"), result.loss_curve);
    }
    return {config, std::move(result.params)};
  }

  /// Fine-tunes (or trains from scratch) and evaluates; results are
  /// memoized by key since several tables share cells.
  const Stage<Scored>& finetuned(const std::string& key, const std::function<Scored()>& f) {
    auto it = memo_.find(key);
    if (it == memo_.end()) it = memo_.emplace(key, attempt<Scored>(key, log_, f)).first;
    return it->second;
  }

  const Stage<Scored>& pretrained_finetune(Variant v, Scenario s, bool subset, Task task) {
    const std::string key = "decoder-only " + model::to_string(v) + " " + netsim::to_string(s) +
                            (subset ? " 10%" : " full") + " " + model::to_string(task);
    return finetuned(key, [=, this] {
      const auto& base = pretrained_.at(v).get();
      const auto& d = scenario(s);
      const auto& norm = norm_.get();
      auto tc = plan_.finetune;
      tc.finetune_mode = training::FinetuneMode::DECODER_ONLY;
      tc.seed = derive_seed(seed_, "shuffle/" + key);
      const auto train = windows(subset ? d.subset : d.train, base.config.window_length(), task, true);
      const auto t0 = std::chrono::steady_clock::now();
      auto r = training::finetune(base.config, base.params, train, task, norm, tc);
      const double secs = seconds_since(t0) + pretrain_seconds_[v];
      const auto test = windows(d.test, base.config.window_length(), task, false);
      auto report = training::evaluate(base.config, r.params, test, norm, model::to_string(v) + "/decoder-only",
                                       netsim::to_string(s) + "/test");
      if (log_) log_("seed " + std::to_string(seed_) + " " + key + " mse " + std::to_string(report.mse));
      return Scored{report, "Decoder only", secs};
    });
  }

  const Stage<Scored>& scratch(Scenario s, bool subset, Task task) {
    const std::string key =
        "scratch " + netsim::to_string(s) + (subset ? " 10%" : " full") + " " + model::to_string(task);
    return finetuned(key, [=, this] {
      const auto& d = scenario(s);
      const auto& norm = norm_.get();
      auto [config, params] = model::build_variant(Variant::FULL, seed_, plan_.model);
      auto tc = plan_.finetune;
      tc.finetune_mode = training::FinetuneMode::FULL;
      tc.seed = derive_seed(seed_, "shuffle/" + key);
      const auto train = windows(subset ? d.subset : d.train, config.window_length(), task, true);
      const auto t0 = std::chrono::steady_clock::now();
      auto r = training::finetune(config, std::move(params), train, task, norm, tc);
      const double secs = seconds_since(t0);
      const auto test = windows(d.test, config.window_length(), task, false);
      auto report = training::evaluate(config, r.params, test, norm, "FULL/from-scratch", netsim::to_string(s) + "/test");
      if (log_) log_("seed " + std::to_string(seed_) + " " + key + " mse " + std::to_string(report.mse));
      return Scored{report, "Full NTT", secs};
    });
  }

  Scored baseline(model::BaselineKind kind, Scenario s, Task task) {
    const auto& d = scenario(s);
    const auto test = windows(d.test, plan_.model.window_length(), task, false);
    return Scored{training::evaluate_baseline(kind, test, netsim::to_string(s) + "/test"), "", 0.0};
  }

  Scored pretrain_eval(Variant v) {
    const auto& m = pretrained_.at(v).get();
    const auto& d = scenario(Scenario::PRETRAIN);
    const auto test = windows(d.test, m.config.window_length(), Task::DELAY, false);
    auto params = m.params;
    return Scored{training::evaluate(m.config, params, test, norm_.get(), model::to_string(v) + "/pretrained",
                                     "PRETRAIN/test"),
                  "", pretrain_seconds_[v]};
  }

  std::string cell_hash(const std::string& table, const std::string& row, const std::string& column) const {
    const nlohmann::json j = {{"plan", plan_hash_}, {"seed", seed_}, {"table", table}, {"row", row}, {"column", column}};
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
  }

  void emit(const std::string& table, const std::string& row, const std::string& column,
            const std::function<Scored()>& f) {
    Cell c;
    c.table = table;
    c.row = row;
    c.column = column;
    c.seed = seed_;
    c.config_hash = cell_hash(table, row, column);
    try {
      auto s = f();
      c.mse = s.report.mse;
      c.n_examples = s.report.n_examples;
      c.detail = s.detail;
      c.train_seconds = s.seconds;
      s.report.provenance = {{"seed", seed_}, {"config_hash", c.config_hash}, {"plan_hash", plan_hash_},
                             {"table", table}, {"row", row}, {"column", column}};
      out_.reports.push_back(s.report);
    } catch (const std::exception& e) {
      c.status = CellStatus::FAILED;
      c.cause = e.what();
    }
    out_.cells.push_back(std::move(c));
  }

  void not_applicable(const std::string& table, const std::string& row, const std::string& column,
                      const std::string& why) {
    Cell c;
    c.table = table;
    c.row = row;
    c.column = column;
    c.seed = seed_;
    c.status = CellStatus::NOT_APPLICABLE;
    c.cause = why;
    c.config_hash = cell_hash(table, row, column);
    out_.cells.push_back(std::move(c));
  }

  static Scored unwrap(const Stage<Scored>& s) { return s.get(); }

  void table1() {
    const std::string t = "table1";
    const auto& cols = table1_columns();
    const bool mct = has_task(Task::LOG_MCT);
    const bool delay = has_task(Task::DELAY);
    auto variant_cells = [&](Variant v) {
      const auto row = variant_row(v);
      if (!has_variant(v)) {
        for (const auto& c : cols) not_applicable(t, row, c, "variant not in plan");
        return;
      }
      emit(t, row, cols[0], [&] { return pretrain_eval(v); });
      if (delay) {
        emit(t, row, cols[1], [&] { return unwrap(pretrained_finetune(v, Scenario::CASE1, true, Task::DELAY)); });
      } else {
        not_applicable(t, row, cols[1], "task not in plan");
      }
      if (mct) {
        emit(t, row, cols[2], [&] { return unwrap(pretrained_finetune(v, Scenario::CASE1, true, Task::LOG_MCT)); });
      } else {
        not_applicable(t, row, cols[2], "task not in plan");
      }
    };
    variant_cells(Variant::FULL);
    not_applicable(t, "From scratch", cols[0], "not pre-trained");
    if (delay) emit(t, "From scratch", cols[1], [&] { return unwrap(scratch(Scenario::CASE1, true, Task::DELAY)); });
    else not_applicable(t, "From scratch", cols[1], "task not in plan");
    if (mct) emit(t, "From scratch", cols[2], [&] { return unwrap(scratch(Scenario::CASE1, true, Task::LOG_MCT)); });
    else not_applicable(t, "From scratch", cols[2], "task not in plan");
    for (auto [kind, row] : {std::pair{model::BaselineKind::LAST_OBSERVED, "Last observed"},
                             std::pair{model::BaselineKind::EWMA, "EWMA"}}) {
      emit(t, row, cols[0], [&] { return baseline(kind, Scenario::PRETRAIN, Task::DELAY); });
      emit(t, row, cols[1], [&] { return baseline(kind, Scenario::CASE1, Task::DELAY); });
      if (mct) emit(t, row, cols[2], [&] { return baseline(kind, Scenario::CASE1, Task::LOG_MCT); });
      else not_applicable(t, row, cols[2], "task not in plan");
    }
    for (auto v : {Variant::NO_AGG, Variant::FIXED_AGG, Variant::NO_SIZE, Variant::NO_DELAY}) variant_cells(v);
  }

  void table23(const std::string& t, Scenario s) {
    const auto& rows = table23_rows();
    if (!has_task(Task::DELAY)) {
      for (const auto& r : rows) not_applicable(t, r, "delay", "task not in plan");
      return;
    }
    if (has_variant(Variant::FULL)) {
      emit(t, rows[0], "delay", [&] { return unwrap(pretrained_finetune(Variant::FULL, s, false, Task::DELAY)); });
      emit(t, rows[1], "delay", [&] { return unwrap(pretrained_finetune(Variant::FULL, s, true, Task::DELAY)); });
    } else {
      not_applicable(t, rows[0], "delay", "variant not in plan");
      not_applicable(t, rows[1], "delay", "variant not in plan");
    }
    emit(t, rows[2], "delay", [&] { return unwrap(scratch(s, false, Task::DELAY)); });
    emit(t, rows[3], "delay", [&] { return unwrap(scratch(s, true, Task::DELAY)); });
  }

  const ExperimentPlan& plan_;
  std::uint64_t seed_;
  const LogFn& log_;
  MatrixResult& out_;
  std::string plan_hash_;
  fs::path dir_;
  std::map<Scenario, Stage<ScenarioData>> data_;
  Stage<model::Normalizer> norm_;
  std::map<Variant, Stage<Trained>> pretrained_;
  std::map<Variant, double> pretrain_seconds_;
  std::map<std::string, Stage<Scored>> memo_;
};

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace

MatrixResult run_experiment_matrix(const ExperimentPlan& plan, const LogFn& log) {
  validate(plan);
  MatrixResult out;
  for (auto seed : plan.seeds) SeedRun(plan, seed, log, out).run();
  if (plan.write_artifacts) {
    fs::create_directories(plan.output_dir);
    const fs::path dir(plan.output_dir);
    nn::write_file_atomic(dir / "matrix.csv", matrix_to_csv(out));
    nn::write_file_atomic(dir / "matrix.json", matrix_to_json(out, plan).dump(2) + "\n");
    nn::write_file_atomic(dir / "reports.jsonl", training::reports_to_jsonl(out.reports));
    nn::write_file_atomic(dir / "tables.txt", format_tables(out));
  }
  return out;
}

std::string matrix_to_csv(const MatrixResult& m) {
  std::ostringstream out;
  out << "table,row,column,seed,status,mse,n_examples,config_hash,detail,cause\n";
  char num[64];
  for (const auto& c : m.cells) {
    std::snprintf(num, sizeof(num), "%.17g", c.mse);
    out << c.table << ',' << csv_escape(c.row) << ',' << c.column << ',' << c.seed << ',' << to_string(c.status) << ','
        << (c.status == CellStatus::OK ? num : "") << ',' << c.n_examples << ',' << c.config_hash << ','
        << csv_escape(c.detail) << ',' << csv_escape(c.cause) << '\n';
  }
  return out.str();
}

nlohmann::json matrix_to_json(const MatrixResult& m, const ExperimentPlan& plan) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : m.cells) {
    cells.push_back({{"table", c.table},
                     {"row", c.row},
                     {"column", c.column},
                     {"seed", c.seed},
                     {"status", to_string(c.status)},
                     {"mse", c.status == CellStatus::OK ? nlohmann::json(c.mse) : nlohmann::json(nullptr)},
                     {"n_examples", c.n_examples},
                     {"config_hash", c.config_hash},
                     {"detail", c.detail},
                     {"cause", c.cause},
                     {"train_seconds", c.train_seconds}});
  }
  return {{"plan", plan}, {"plan_hash", plan_hash(plan)}, {"cells", cells}};
}

MatrixResult matrix_from_json(const nlohmann::json& j) {
  MatrixResult m;
  try {
    for (const auto& c : j.at("cells")) {
      Cell cell;
      cell.table = c.at("table").get<std::string>();
      cell.row = c.at("row").get<std::string>();
      cell.column = c.at("column").get<std::string>();
      cell.seed = c.at("seed").get<std::uint64_t>();
      const auto status = c.at("status").get<std::string>();
      cell.status = status == "OK" ? CellStatus::OK : status == "FAILED" ? CellStatus::FAILED : CellStatus::NOT_APPLICABLE;
      if (!c.at("mse").is_null()) cell.mse = c.at("mse").get<double>();
      cell.n_examples = c.value("n_examples", std::size_t{0});
      cell.config_hash = c.value("config_hash", std::string());
      cell.detail = c.value("detail", std::string());
      cell.cause = c.value("cause", std::string());
      cell.train_seconds = c.value("train_seconds", 0.0);
      m.cells.push_back(std::move(cell));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("matrix json: ") + e.what());
  }
  return m;
}

std::string format_tables(const MatrixResult& m) {
  std::ostringstream out;
  auto render = [&](const std::string& table, const std::string& title, const std::vector<std::string>& rows,
                    const std::vector<std::string>& cols) {
    out << title << "\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "  %-22s", "");
    out << buf;
    for (const auto& c : cols) {
      std::snprintf(buf, sizeof(buf), "%22s", c.c_str());
      out << buf;
    }
    out << "\n";
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "  %-22s", r.c_str());
      out << buf;
      for (const auto& c : cols) {
        double sum = 0.0;
        int ok = 0, failed = 0, na = 0;
        for (const auto& cell : m.cells) {
          if (cell.table != table || cell.row != r || cell.column != c) continue;
          if (cell.status == CellStatus::OK) {
            sum += cell.mse;
            ++ok;
          } else if (cell.status == CellStatus::FAILED) {
            ++failed;
          } else {
            ++na;
          }
        }
        if (ok > 0) {
          std::snprintf(buf, sizeof(buf), "%.4f%s", 1e3 * sum / ok, failed ? "*" : "");
        } else {
          std::snprintf(buf, sizeof(buf), "%s", failed ? "FAILED" : "-");
        }
        std::string cell_text = buf;
        std::snprintf(buf, sizeof(buf), "%22s", cell_text.c_str());
        out << buf;
      }
      out << "\n";
    }
    out << "\n";
  };
  out << "MSE x 1e-3, mean over seeds (delay in s^2, MCT in ln(s)^2; * = some seeds FAILED)\n\n";
  render("table1", "Table 1: all models and tasks (fine-tuning on the 10% CASE1 dataset)", table1_rows(),
         table1_columns());
  render("table2", "Table 2: CASE1 delay, pre-trained (decoder only) vs from scratch (full NTT)", table23_rows(),
         {"delay"});
  render("table3", "Table 3: CASE2 delay, pre-trained (decoder only) vs from scratch (full NTT)", table23_rows(),
         {"delay"});
  return out.str();
}

}  // namespace nttlab::experiment
