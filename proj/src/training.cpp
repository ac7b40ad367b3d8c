#include "nttlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "nttlab/checkpoint.hpp"
#include "nttlab/error.hpp"
#include "nttlab/rng.hpp"

namespace nttlab::training {

using model::SequenceWindow;
using nn::Graph;
using nn::Var;

std::string to_string(FinetuneMode m) { return m == FinetuneMode::DECODER_ONLY ? "DECODER_ONLY" : "FULL"; }

FinetuneMode parse_finetune_mode(const std::string& text) {
  if (text == "DECODER_ONLY" || text == "decoder_only" || text == "decoder") return FinetuneMode::DECODER_ONLY;
  if (text == "FULL" || text == "full") return FinetuneMode::FULL;
  throw ConfigError("unknown fine-tune mode '" + text + "' (expected DECODER_ONLY or FULL)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"window_stride", c.window_stride},
       {"seed", c.seed},
       {"finetune_mode", to_string(c.finetune_mode)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.window_stride = j.value("window_stride", c.window_stride);
    c.seed = j.value("seed", c.seed);
    if (j.contains("finetune_mode")) c.finetune_mode = parse_finetune_mode(j.at("finetune_mode").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  validate(c);
}

void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ConfigError("learning rate must be positive");
  if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (c.window_stride == 0) throw ConfigError("window_stride must be >= 1");
}

namespace {

/// Welford accumulator; exact zero variance on constant data.
struct Moments {
  double m = 0.0;
  double m2 = 0.0;
  std::size_t n = 0;

  void add(double x) {
    ++n;
    const double delta = x - m;
    m += delta / static_cast<double>(n);
    m2 += delta * (x - m);
  }
  double mean() const { return m; }
  double std() const {
    if (n == 0) return 1.0;
    return std::max(std::sqrt(std::max(0.0, m2 / static_cast<double>(n))), kStdFloor);
  }
};

}  // namespace

Normalizer fit_normalizer(const trace::TraceDataset& train, std::size_t window_length, std::size_t stride) {
  if (train.records.empty()) throw ValidationError("cannot fit a normalizer on an empty dataset");
  if (window_length == 0 || stride == 0) throw ConfigError("normalizer window length and stride must be >= 1");
  Moments size, delay, dt, log_msg, log_mct;
  for (const auto& r : train.records) {
    size.add(static_cast<double>(r.size));
    delay.add(r.delay);
  }
  for (const auto& run : train.runs()) {
    const auto& rec = run.records;
    const std::size_t n = rec.size();
    for (std::size_t end = std::min(window_length, n) - 1; end < n; end += stride) {
      const std::size_t begin = end + 1 >= window_length ? end + 1 - window_length : 0;
      for (std::size_t i = begin; i <= end; ++i) dt.add(rec[i].send_time - rec[end].send_time);
    }
  }
  for (const auto& m : trace::derive_mct_records(train)) {
    log_msg.add(std::log(static_cast<double>(m.message_size)));
    log_mct.add(std::log(m.mct));
  }
  Normalizer norm;
  norm.size_mean = size.mean();
  norm.size_std = size.std();
  norm.delay_mean = delay.mean();
  norm.delay_std = delay.std();
  norm.dt_mean = dt.mean();
  norm.dt_std = dt.std();
  norm.log_msg_mean = log_msg.mean();
  norm.log_msg_std = log_msg.std();
  norm.log_mct_mean = log_mct.mean();
  norm.log_mct_std = log_mct.std();
  return norm;
}

std::set<std::int64_t> WindowSet::run_ids() const {
  std::set<std::int64_t> out;
  for (const auto& r : refs) out.insert(data->records[r.end].sim_id);
  return out;
}

SequenceWindow WindowSet::window(std::size_t i, const model::FeatureSchema& schema, const Normalizer& norm) const {
  const auto& ref = refs.at(i);
  const std::span<const trace::PacketRecord> all(data->records);
  auto w = model::featurize_window(all.subspan(ref.end + 1 - length, length), length, schema, norm);
  w.message_size = ref.message_size;
  if (task == Task::LOG_MCT) w.target_log_mct = ref.target;
  return model::mask_last_delay(std::move(w), schema);
}

std::vector<double> WindowSet::baseline_history(std::size_t i) const {
  const auto& ref = refs.at(i);
  std::vector<double> out;
  if (task == Task::DELAY) {
    out.reserve(length - 1);
    for (std::size_t k = ref.end + 1 - length; k < ref.end; ++k) out.push_back(data->records[k].delay);
    return out;
  }
  const auto& msgs = run_messages.at(ref_run.at(i));
  for (const auto& m : msgs) {
    if (m.completion <= ref.message_start) out.push_back(m.log_mct);
  }
  if (out.empty()) {
    std::vector<const PastMessage*> started;
    for (const auto& m : msgs) {
      if (m.start < ref.message_start) started.push_back(&m);
    }
    std::stable_sort(started.begin(), started.end(),
                     [](const PastMessage* a, const PastMessage* b) { return a->start < b->start; });
    for (const auto* m : started) out.push_back(m->log_mct);
  }
  return out;
}

WindowSet WindowSet::subset(const std::vector<std::size_t>& indices) const {
  WindowSet out;
  out.data = data;
  out.task = task;
  out.length = length;
  out.run_messages = run_messages;
  for (auto i : indices) {
    out.refs.push_back(refs.at(i));
    if (!ref_run.empty()) out.ref_run.push_back(ref_run.at(i));
  }
  return out;
}

WindowSet make_windows(std::shared_ptr<const trace::TraceDataset> data, std::size_t length, std::size_t stride,
                       Task task, std::size_t min_end) {
  if (!data) throw ValidationError("make_windows: no dataset");
  if (length == 0 || stride == 0) throw ConfigError("window length and stride must be >= 1");
  WindowSet ws;
  ws.data = data;
  ws.task = task;
  ws.length = length;
  const auto& records = data->records;
  std::unordered_map<std::int64_t, trace::MctRecord> mct_by_message;
  if (task == Task::LOG_MCT) {
    for (const auto& m : trace::derive_mct_records(*data)) mct_by_message.emplace(m.message_id, m);
  }
  const std::size_t first = std::max(length - 1, min_end);
  std::size_t offset = 0;
  for (const auto& run : data->runs()) {
    const std::size_t n = run.records.size();
    if (task == Task::DELAY) {
      for (std::size_t end = first; end < n; end += stride) {
        ws.refs.push_back({offset + end, records[offset + end].message_size, records[offset + end].delay, 0.0});
      }
    } else {
      std::vector<WindowSet::PastMessage> msgs;
      std::unordered_map<std::int64_t, bool> seen;
      const std::size_t run_index = ws.run_messages.size();
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = run.records[i];
        if (seen.emplace(r.message_id, true).second == false) continue;
        const auto& m = mct_by_message.at(r.message_id);
        msgs.push_back({m.start_time, m.completion_time, std::log(m.mct)});
        if (i >= first) {
          ws.refs.push_back({offset + i, m.message_size, std::log(m.mct), m.start_time});
          ws.ref_run.push_back(run_index);
        }
      }
      std::stable_sort(msgs.begin(), msgs.end(), [](const auto& a, const auto& b) { return a.completion < b.completion; });
      ws.run_messages.push_back(std::move(msgs));
    }
    offset += n;
  }
  return ws;
}

namespace {

using LossFn = std::function<Var(Graph&, std::size_t)>;

std::vector<double> run_training(const nn::ParameterList& trainable, const nn::ParameterList& all, std::size_t n,
                                 const LossFn& loss_of, const TrainConfig& tc, const ProgressFn& progress) {
  validate(tc);
  std::vector<double> curve;
  if (tc.epochs == 0) return curve;
  if (n == 0) throw ValidationError("no training windows");
  nn::AdamState state(nn::AdamConfig{tc.lr}, trainable);
  Rng rng(derive_seed(tc.seed, "shuffle"));
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += tc.batch_size, ++batch_index) {
      const std::size_t stop = std::min(n, start + tc.batch_size);
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      nn::zero_grad(all);
      try {
        for (std::size_t k = start; k < stop; ++k) {
          Graph g;
          const Var loss = loss_of(g, order[k]);
          epoch_loss += g.value(loss).item();
          g.backward(g.scale(loss, inv_b));
        }
        nn::adam_step(trainable, state);
      } catch (const NumericError& e) {
        std::ostringstream msg;
        msg << e.what() << " (lr=" << tc.lr << ", epoch " << epoch << ", batch " << batch_index << ")";
        throw NumericError(msg.str());
      }
    }
    curve.push_back(epoch_loss / static_cast<double>(n));
    if (progress) progress(epoch, curve.back());
  }
  nn::zero_grad(all);
  return curve;
}

double normalized_target(const Normalizer& norm, Task task, double raw) {
  return task == Task::DELAY ? (raw - norm.delay_mean) / norm.delay_std
                             : (raw - norm.log_mct_mean) / norm.log_mct_std;
}

double denormalize(const Normalizer& norm, Task task, double z) {
  return task == Task::DELAY ? z * norm.delay_std + norm.delay_mean : z * norm.log_mct_std + norm.log_mct_mean;
}

Var head_output(Graph& g, Var slot, Task task, std::int64_t message_size, const Normalizer& norm, NTTParams& p) {
  return task == Task::DELAY ? model::predict_delay_from_slot(g, slot, p)
                             : model::predict_log_mct_from_slot(g, slot, message_size, norm, p);
}

Var full_forward(Graph& g, const SequenceWindow& w, Task task, const NTTConfig& c, const Normalizer& norm,
                 NTTParams& p) {
  const Var enc = model::forward_encoder(g, w.features, p, c);
  const Var slot = g.slice_rows(enc, g.value(enc).rows() - 1, 1);
  return head_output(g, slot, task, w.message_size, norm, p);
}

void check_windows(const NTTConfig& config, const WindowSet& ws, Task task) {
  if (ws.task != task) {
    throw StateError("windows were built for " + model::to_string(ws.task) + " but training targets " +
                     model::to_string(task));
  }
  if (ws.length != config.window_length()) {
    throw ConfigError("window length " + std::to_string(ws.length) + " does not match model window " +
                      std::to_string(config.window_length()));
  }
}

}  // namespace

TrainResult pretrain(const NTTConfig& config, NTTParams params, const WindowSet& train, const Normalizer& norm,
                     const TrainConfig& tc, const ProgressFn& progress) {
  check_windows(config, train, Task::DELAY);
  auto trainable = params.body_parameters();
  for (auto* p : params.delay_head_parameters()) trainable.push_back(p);
  const auto all = params.all_parameters();
  const LossFn loss_of = [&](Graph& g, std::size_t i) {
    const auto w = train.window(i, config.schema, norm);
    const Var pred = full_forward(g, w, Task::DELAY, config, norm, params);
    const Var target = g.constant(nn::Tensor::scalar(normalized_target(norm, Task::DELAY, w.target_delay)));
    return nn::mse_loss(g, pred, target);
  };
  auto curve = run_training(trainable, all, train.size(), loss_of, tc, progress);
  return {std::move(params), std::move(curve)};
}

TrainResult finetune(const NTTConfig& config, NTTParams params, const WindowSet& train, Task task,
                     const Normalizer& norm, const TrainConfig& tc, const ProgressFn& progress) {
  check_windows(config, train, task);
  if (task == Task::LOG_MCT && !params.mct_head) params.mct_head = model::make_mct_head(config);
  const auto head = task == Task::DELAY ? params.delay_head_parameters() : params.mct_head_parameters();
  const auto all = params.all_parameters();
  const auto target_of = [&](std::size_t i) { return normalized_target(norm, task, train.refs[i].target); };

  if (tc.finetune_mode == FinetuneMode::DECODER_ONLY) {
    // The body is frozen, so each window's newest encoded slot is fixed.
    std::vector<nn::Tensor> slots;
    if (tc.epochs > 0) {
      slots.reserve(train.size());
      for (std::size_t i = 0; i < train.size(); ++i) {
        slots.push_back(model::encode_newest_slot(train.window(i, config.schema, norm).features, params, config));
      }
    }
    const LossFn loss_of = [&](Graph& g, std::size_t i) {
      const Var pred = head_output(g, g.constant(slots[i]), task, train.refs[i].message_size, norm, params);
      return nn::mse_loss(g, pred, g.constant(nn::Tensor::scalar(target_of(i))));
    };
    auto curve = run_training(head, all, train.size(), loss_of, tc, progress);
    return {std::move(params), std::move(curve)};
  }

  auto trainable = params.body_parameters();
  trainable.insert(trainable.end(), head.begin(), head.end());
  const LossFn loss_of = [&](Graph& g, std::size_t i) {
    const auto w = train.window(i, config.schema, norm);
    const Var pred = full_forward(g, w, task, config, norm, params);
    return nn::mse_loss(g, pred, g.constant(nn::Tensor::scalar(target_of(i))));
  };
  auto curve = run_training(trainable, all, train.size(), loss_of, tc, progress);
  return {std::move(params), std::move(curve)};
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"task", model::to_string(r.task)},
       {"mse", r.mse},
       {"mse_units", r.task == Task::DELAY ? "s^2" : "ln(s)^2"},
       {"n_examples", r.n_examples},
       {"model", r.model_label},
       {"dataset", r.dataset_label},
       {"provenance", r.provenance}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  try {
    r.task = model::parse_task(j.at("task").get<std::string>());
    j.at("mse").get_to(r.mse);
    j.at("n_examples").get_to(r.n_examples);
    j.at("model").get_to(r.model_label);
    j.at("dataset").get_to(r.dataset_label);
    r.provenance = j.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("eval report: ") + e.what());
  }
}

std::vector<double> targets(const WindowSet& windows) {
  std::vector<double> out;
  out.reserve(windows.size());
  for (const auto& r : windows.refs) out.push_back(r.target);
  return out;
}

std::vector<double> predict(const NTTConfig& config, NTTParams& params, const WindowSet& windows,
                            const Normalizer& norm) {
  check_windows(config, windows, windows.task);
  std::vector<double> out;
  out.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    Graph g(false);
    const auto w = windows.window(i, config.schema, norm);
    const Var pred = full_forward(g, w, windows.task, config, norm, params);
    out.push_back(denormalize(norm, windows.task, g.value(pred).item()));
  }
  return out;
}

EvalReport score(const std::vector<double>& predictions, const WindowSet& windows, std::string model_label,
                 std::string dataset_label) {
  if (windows.size() == 0) throw ValidationError("evaluation needs at least one test window");
  if (predictions.size() != windows.size()) {
    throw ShapeError("score: " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(windows.size()) + " windows");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - windows.refs[i].target;
    acc += d * d;
  }
  EvalReport r;
  r.task = windows.task;
  r.mse = acc / static_cast<double>(predictions.size());
  r.n_examples = predictions.size();
  r.model_label = std::move(model_label);
  r.dataset_label = std::move(dataset_label);
  return r;
}

EvalReport evaluate(const NTTConfig& config, NTTParams& params, const WindowSet& windows, const Normalizer& norm,
                    std::string model_label, std::string dataset_label) {
  if (windows.size() == 0) throw ValidationError("evaluation needs at least one test window");
  return score(predict(config, params, windows, norm), windows, std::move(model_label), std::move(dataset_label));
}

EvalReport evaluate_baseline(model::BaselineKind kind, const WindowSet& windows, std::string dataset_label) {
  if (windows.size() == 0) throw ValidationError("evaluation needs at least one test window");
  std::vector<double> preds;
  preds.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    preds.push_back(model::baseline_predict(kind, windows.baseline_history(i)));
  }
  return score(preds, windows, model::to_string(kind), std::move(dataset_label));
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,loss\n";
  for (std::size_t e = 0; e < curve.size(); ++e) out << e << ',' << curve[e] << '\n';
  nn::write_file_atomic(path, out.str());
}

std::string reports_to_jsonl(const std::vector<EvalReport>& reports) {
  std::string out;
  for (const auto& r : reports) out += nlohmann::json(r).dump() + "\n";
  return out;
}

}  // namespace nttlab::training
