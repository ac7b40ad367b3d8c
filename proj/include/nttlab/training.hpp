#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nttlab/adam.hpp"
#include "nttlab/model.hpp"
#include "nttlab/trace.hpp"

namespace nttlab::training {

using model::NTTConfig;
using model::NTTParams;
using model::Normalizer;
using model::Task;

inline constexpr double kStdFloor = 1e-9;

enum class FinetuneMode { DECODER_ONLY, FULL };

std::string to_string(FinetuneMode m);
FinetuneMode parse_finetune_mode(const std::string& text);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  std::size_t window_stride = 16;
  std::uint64_t seed = 0;
  FinetuneMode finetune_mode = FinetuneMode::DECODER_ONLY;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void validate(const TrainConfig& c);

/// Means and population stds over the training split. dt statistics are
/// taken over the offsets seen inside stride-spaced windows of
/// `window_length`; message statistics over the messages of the split.
Normalizer fit_normalizer(const trace::TraceDataset& train, std::size_t window_length = 1024,
                          std::size_t stride = 16);

/// A window kept as a position in its dataset; features are built on demand.
struct WindowRef {
  std::size_t end = 0;  // index of the newest record in dataset.records
  std::int64_t message_size = 0;
  double target = 0.0;  // delay in seconds, or ln(mct seconds)
  double message_start = 0.0;
};

struct WindowSet {
  std::shared_ptr<const trace::TraceDataset> data;
  Task task = Task::DELAY;
  std::size_t length = 0;
  std::vector<WindowRef> refs;
  /// Per run, prior log-MCTs in completion order with their completion
  /// and start times (MCT tasks only).
  struct PastMessage {
    double start;
    double completion;
    double log_mct;
  };
  std::vector<std::vector<PastMessage>> run_messages;
  std::vector<std::size_t> ref_run;  // index into run_messages, per ref

  std::size_t size() const { return refs.size(); }
  std::set<std::int64_t> run_ids() const;

  /// Featurized and masked window i.
  model::SequenceWindow window(std::size_t i, const model::FeatureSchema& schema, const Normalizer& norm) const;

  /// Observed history a naive predictor may use for window i: the earlier
  /// delays inside the window (DELAY), or the log-MCTs of earlier messages
  /// of the run completed by the message start (LOG_MCT).
  std::vector<double> baseline_history(std::size_t i) const;

  WindowSet subset(const std::vector<std::size_t>& indices) const;
};

/// DELAY: one window per stride step per run, newest at positions
/// first, first+stride, ... with first = max(L-1, min_end). LOG_MCT: one
/// window per message whose first packet sits at position >= first in its
/// run; the window ends at that packet. A shared min_end gives variants
/// with different window lengths the same targets.
WindowSet make_windows(std::shared_ptr<const trace::TraceDataset> data, std::size_t length, std::size_t stride,
                       Task task, std::size_t min_end = 0);

struct TrainResult {
  NTTParams params;
  std::vector<double> loss_curve;  // mean normalized training loss per epoch
};

using ProgressFn = std::function<void(std::size_t epoch, double loss)>;

/// Masked-delay pre-training of body and delay head.
TrainResult pretrain(const NTTConfig& config, NTTParams params, const WindowSet& train, const Normalizer& norm,
                     const TrainConfig& tc, const ProgressFn& progress = {});

/// DECODER_ONLY updates only the task head (a fresh head is attached for
/// LOG_MCT when absent); FULL updates body and task head.
TrainResult finetune(const NTTConfig& config, NTTParams params, const WindowSet& train, Task task,
                     const Normalizer& norm, const TrainConfig& tc, const ProgressFn& progress = {});

struct EvalReport {
  Task task = Task::DELAY;
  double mse = 0.0;  // seconds^2 for DELAY, squared natural-log seconds for LOG_MCT
  std::size_t n_examples = 0;
  std::string model_label;
  std::string dataset_label;
  nlohmann::json provenance = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// Raw-scale predictions: seconds for DELAY, ln(seconds) for LOG_MCT.
std::vector<double> predict(const NTTConfig& config, NTTParams& params, const WindowSet& windows,
                            const Normalizer& norm);
std::vector<double> targets(const WindowSet& windows);

EvalReport score(const std::vector<double>& predictions, const WindowSet& windows, std::string model_label,
                 std::string dataset_label);

EvalReport evaluate(const NTTConfig& config, NTTParams& params, const WindowSet& windows, const Normalizer& norm,
                    std::string model_label, std::string dataset_label);

EvalReport evaluate_baseline(model::BaselineKind kind, const WindowSet& windows, std::string dataset_label);

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& curve);
std::string reports_to_jsonl(const std::vector<EvalReport>& reports);

}  // namespace nttlab::training
