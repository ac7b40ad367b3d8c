#include <catch_amalgamated.hpp>

#include <filesystem>
#include <map>
#include <set>

#include "helpers.hpp"
#include "nttlab/checkpoint.hpp"
#include "nttlab/error.hpp"
#include "nttlab/experiment.hpp"

using namespace nttlab;
using namespace nttlab::experiment;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("nttlab-test-experiment-" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("tiny matrix: structure") {
  auto plan = testutil::tiny_plan(scratch_dir("structure").string());
  plan.write_artifacts = false;
  const auto m = run_experiment_matrix(plan);
  CHECK(m.cells.size() == 8 * 3 + 4 + 4);
  std::map<std::string, std::set<std::string>> rows;
  for (const auto& c : m.cells) {
    rows[c.table].insert(c.row);
    CHECK(c.seed == 1);
    CHECK(c.status != CellStatus::FAILED);
    CHECK(c.config_hash.size() == 16);
    if (c.status == CellStatus::OK) {
      CHECK(c.mse >= 0.0);
      CHECK(c.n_examples > 0);
    }
  }
  CHECK(rows["table1"].size() == 8);
  CHECK(rows["table2"].size() == 4);
  CHECK(rows["table3"].size() == 4);
  CHECK(m.find("table1", "From scratch", "pretrain_delay", 1)->status == CellStatus::NOT_APPLICABLE);
  CHECK(m.find("table2", "Pre-trained/10%", "delay", 1)->detail == "Decoder only");
  CHECK(m.find("table3", "From scratch/full", "delay", 1)->detail == "Full NTT");
  // Table 1 and Table 2 share the same fine-tuned cell.
  CHECK(m.find("table1", "Pre-trained", "finetune_delay", 1)->mse ==
        m.find("table2", "Pre-trained/10%", "delay", 1)->mse);
  CHECK(m.reports.size() == 8 * 3 - 1 + 8);
}

TEST_CASE("tiny matrix: deterministic artifacts") {
  const auto a_dir = scratch_dir("det-a"), b_dir = scratch_dir("det-b");
  const auto a = run_experiment_matrix(testutil::tiny_plan(a_dir.string()));
  const auto b = run_experiment_matrix(testutil::tiny_plan(b_dir.string()));
  CHECK(matrix_to_csv(a) == matrix_to_csv(b));
  CHECK(nn::read_file(a_dir / "matrix.csv") == nn::read_file(b_dir / "matrix.csv"));
  CHECK(nn::read_file(a_dir / "reports.jsonl") == nn::read_file(b_dir / "reports.jsonl"));
  for (const auto* rel : {"seed-1/traces/PRETRAIN.csv", "seed-1/traces/CASE2.csv",
                          "seed-1/checkpoints/pretrain-FULL.ckpt", "seed-1/checkpoints/pretrain-NO_DELAY.ckpt"}) {
    INFO(rel);
    REQUIRE(fs::exists(a_dir / rel));
    CHECK(nn::read_file(a_dir / rel) == nn::read_file(b_dir / rel));
  }
  CHECK(fs::exists(a_dir / "tables.txt"));
  CHECK(fs::exists(a_dir / "seed-1/traces/CASE1.csv.meta.json"));
  CHECK(fs::exists(a_dir / "seed-1/checkpoints/pretrain-FULL.ckpt.config.json"));
}

TEST_CASE("tiny matrix: a failing stage marks only its dependents") {
  auto plan = testutil::tiny_plan(scratch_dir("failing").string());
  plan.write_artifacts = false;
  plan.pretrain.lr = 1e300;
  plan.pretrain.epochs = 2;  // the second epoch's forward sees the blown-up weights
  std::vector<std::string> log;
  const auto m = run_experiment_matrix(plan, [&](const std::string& s) { log.push_back(s); });
  const auto* pre = m.find("table1", "Pre-trained", "pretrain_delay", 1);
  REQUIRE(pre != nullptr);
  CHECK(pre->status == CellStatus::FAILED);
  CHECK_THAT(pre->cause, Catch::Matchers::ContainsSubstring("pretrain FULL") &&
                             Catch::Matchers::ContainsSubstring("lr="));
  CHECK(m.find("table2", "Pre-trained/full", "delay", 1)->status == CellStatus::FAILED);
  CHECK(m.find("table1", "Last observed", "finetune_delay", 1)->status == CellStatus::OK);
  CHECK(m.find("table3", "From scratch/10%", "delay", 1)->status == CellStatus::OK);
  bool logged = false;
  for (const auto& s : log) logged = logged || s.rfind("FAILED pretrain", 0) == 0;
  CHECK(logged);
  const auto csv = matrix_to_csv(m);
  CHECK(csv.find(",FAILED,") != std::string::npos);
  CHECK(format_tables(m).find("FAILED") != std::string::npos);
}

TEST_CASE("tiny matrix: JSON round trip and CSV schema") {
  auto plan = testutil::tiny_plan(scratch_dir("json").string());
  plan.write_artifacts = false;
  plan.variants = {model::Variant::FULL};
  plan.tasks = {model::Task::DELAY};
  const auto m = run_experiment_matrix(plan);
  const auto j = matrix_to_json(m, plan);
  CHECK(j.at("plan_hash") == plan_hash(plan));
  const auto back = matrix_from_json(nlohmann::json::parse(j.dump()));
  CHECK(matrix_to_csv(back) == matrix_to_csv(m));
  const auto csv = matrix_to_csv(m);
  CHECK(csv.rfind("table,row,column,seed,status,mse,n_examples,config_hash,detail,cause\n", 0) == 0);
  CHECK(m.find("table1", "Pre-trained", "finetune_log_mct", 1)->status == CellStatus::NOT_APPLICABLE);
  CHECK(m.find("table1", "Without delay", "pretrain_delay", 1)->status == CellStatus::NOT_APPLICABLE);
  const auto tables = format_tables(m);
  for (const auto& row : table23_rows()) CHECK(tables.find(row) != std::string::npos);
}

TEST_CASE("plan JSON and validation") {
  ExperimentPlan p;
  CHECK(p.pretrain.epochs == 20);
  CHECK(p.finetune.epochs == 10);
  CHECK(p.seeds == std::vector<std::uint64_t>{1, 2, 3});
  nlohmann::json j = p;
  const auto back = j.get<ExperimentPlan>();
  CHECK(plan_hash(back) == plan_hash(p));
  const auto partial = nlohmann::json::parse(R"({"seeds": [4], "pretrain": {"epochs": 2}})").get<ExperimentPlan>();
  CHECK(partial.seeds == std::vector<std::uint64_t>{4});
  CHECK(partial.pretrain.epochs == 2);
  CHECK(partial.pretrain.lr == 1e-3);
  auto other = p;
  other.output_dir = "elsewhere";
  CHECK(plan_hash(other) == plan_hash(p));
  other.seeds = {9};
  CHECK(plan_hash(other) != plan_hash(p));
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"seeds": []})").get<ExperimentPlan>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"test_fraction": 1.5})").get<ExperimentPlan>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"variants": ["BIG"]})").get<ExperimentPlan>(), ConfigError);
}

TEST_CASE("trace artifact round trip") {
  const auto dir = scratch_dir("trace");
  fs::create_directories(dir);
  auto ds = testutil::random_dataset(3, 2, 100);
  ds.meta.config_hash = "abc";
  write_trace_artifact(ds, dir / "t.csv");
  const auto back = read_trace_artifact(dir / "t.csv");
  CHECK(back.meta.scenario == "TEST");
  CHECK(back.meta.seed == 3);
  CHECK(back.meta.config_hash == "abc");
  CHECK(trace::equal_at_print_precision(ds, back));
}
