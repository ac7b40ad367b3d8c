#include "nttlab/model.hpp"

#include <cmath>

#include "nttlab/error.hpp"
#include "nttlab/rng.hpp"

namespace nttlab::model {

void to_json(nlohmann::json& j, const Normalizer& n) {
  j = {{"dt_mean", n.dt_mean},           {"dt_std", n.dt_std},
       {"size_mean", n.size_mean},       {"size_std", n.size_std},
       {"delay_mean", n.delay_mean},     {"delay_std", n.delay_std},
       {"log_msg_mean", n.log_msg_mean}, {"log_msg_std", n.log_msg_std},
       {"log_mct_mean", n.log_mct_mean}, {"log_mct_std", n.log_mct_std}};
}

void from_json(const nlohmann::json& j, Normalizer& n) {
  try {
    j.at("dt_mean").get_to(n.dt_mean);
    j.at("dt_std").get_to(n.dt_std);
    j.at("size_mean").get_to(n.size_mean);
    j.at("size_std").get_to(n.size_std);
    j.at("delay_mean").get_to(n.delay_mean);
    j.at("delay_std").get_to(n.delay_std);
    j.at("log_msg_mean").get_to(n.log_msg_mean);
    j.at("log_msg_std").get_to(n.log_msg_std);
    j.at("log_mct_mean").get_to(n.log_mct_mean);
    j.at("log_mct_std").get_to(n.log_mct_std);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("normalizer: ") + e.what());
  }
}

std::string to_string(AggregationKind k) {
  switch (k) {
    case AggregationKind::MULTISCALE: return "MULTISCALE";
    case AggregationKind::NONE: return "NONE";
    case AggregationKind::FIXED: return "FIXED";
  }
  return "?";
}

AggregationKind parse_aggregation(const std::string& text) {
  if (text == "MULTISCALE") return AggregationKind::MULTISCALE;
  if (text == "NONE") return AggregationKind::NONE;
  if (text == "FIXED") return AggregationKind::FIXED;
  throw ConfigError("unknown aggregation '" + text + "'");
}

void to_json(nlohmann::json& j, const NTTConfig& c) {
  j = {{"d_model", c.d_model},
       {"n_heads", c.n_heads},
       {"n_layers", c.n_layers},
       {"d_ff", c.d_ff},
       {"schema",
        {{"use_size", c.schema.use_size}, {"use_delay", c.schema.use_delay}, {"n_receivers", c.schema.n_receivers}}},
       {"aggregation", to_string(c.aggregation)},
       {"scheme",
        {{"raw_count", c.scheme.raw_count},
         {"level1_groups", c.scheme.level1_groups},
         {"level2_groups", c.scheme.level2_groups},
         {"factor", c.scheme.factor}}},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NTTConfig& c) {
  try {
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_ff").get_to(c.d_ff);
    const auto& s = j.at("schema");
    s.at("use_size").get_to(c.schema.use_size);
    s.at("use_delay").get_to(c.schema.use_delay);
    s.at("n_receivers").get_to(c.schema.n_receivers);
    c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    const auto& a = j.at("scheme");
    a.at("raw_count").get_to(c.scheme.raw_count);
    a.at("level1_groups").get_to(c.scheme.level1_groups);
    a.at("level2_groups").get_to(c.scheme.level2_groups);
    a.at("factor").get_to(c.scheme.factor);
    j.at("seed").get_to(c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  validate(c);
}

void validate(const NTTConfig& c) {
  if (c.d_model == 0 || c.n_heads == 0 || c.d_model % c.n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(c.d_model) + " is not divisible by n_heads " +
                      std::to_string(c.n_heads));
  }
  if (c.d_ff == 0) throw ConfigError("d_ff must be positive");
  if (c.schema.n_receivers == 0) throw ConfigError("schema needs at least one receiver column");
  if (c.scheme.factor == 0 || c.scheme.slots() == 0) throw ConfigError("aggregation scheme has no slots");
  switch (c.aggregation) {
    case AggregationKind::NONE:
      if (c.scheme.uses_level1()) throw ConfigError("aggregation NONE cannot have aggregated groups");
      break;
    case AggregationKind::FIXED:
      if (c.scheme.level2_groups != 0 || c.scheme.raw_count != 0) {
        throw ConfigError("aggregation FIXED is a single level without raw slots");
      }
      break;
    case AggregationKind::MULTISCALE:
      break;
  }
}

NTTConfig tiny_config(std::uint64_t seed) {
  NTTConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 16;
  c.scheme = {4, 4, 5, 2};
  c.seed = seed;
  return c;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::FULL: return "FULL";
    case Variant::NO_AGG: return "NO_AGG";
    case Variant::FIXED_AGG: return "FIXED_AGG";
    case Variant::NO_DELAY: return "NO_DELAY";
    case Variant::NO_SIZE: return "NO_SIZE";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  for (auto v : kAllVariants) {
    if (to_string(v) == text) return v;
  }
  throw ConfigError("unknown variant '" + text + "' (expected FULL, NO_AGG, FIXED_AGG, NO_DELAY, NO_SIZE)");
}

std::string to_string(Task t) { return t == Task::DELAY ? "DELAY" : "LOG_MCT"; }

Task parse_task(const std::string& text) {
  if (text == "DELAY" || text == "delay") return Task::DELAY;
  if (text == "LOG_MCT" || text == "log_mct" || text == "MCT" || text == "mct") return Task::LOG_MCT;
  throw ConfigError("unknown task '" + text + "' (expected DELAY or LOG_MCT)");
}

namespace {

bool present(const Linear& l) { return !l.W.value.shape().empty(); }

void append(ParameterList& out, ParameterList more) { out.insert(out.end(), more.begin(), more.end()); }

MlpHead make_head(const std::string& name, std::size_t d_in, std::size_t d, Rng& rng) {
  return MlpHead{Linear(name + ".hidden", d_in, d, rng), Linear(name + ".out", d, 1, rng)};
}

Var head_forward(Graph& g, Var x, MlpHead& h) {
  return nn::linear_forward(g, g.relu(nn::linear_forward(g, x, h.hidden)), h.out);
}

}  // namespace

ParameterList NTTParams::body_parameters() {
  ParameterList out;
  append(out, embed1.parameters());
  append(out, embed2.parameters());
  if (present(level1)) append(out, level1.parameters());
  if (present(level2)) append(out, level2.parameters());
  out.push_back(&positional);
  for (auto& b : blocks) {
    append(out, b.ln1.parameters());
    append(out, b.attn.parameters());
    append(out, b.ln2.parameters());
    append(out, b.ff.parameters());
  }
  return out;
}

ParameterList NTTParams::delay_head_parameters() {
  ParameterList out = delay_head.hidden.parameters();
  append(out, delay_head.out.parameters());
  return out;
}

ParameterList NTTParams::mct_head_parameters() {
  if (!mct_head) return {};
  ParameterList out = mct_head->hidden.parameters();
  append(out, mct_head->out.parameters());
  return out;
}

ParameterList NTTParams::all_parameters() {
  ParameterList out = body_parameters();
  append(out, delay_head_parameters());
  append(out, mct_head_parameters());
  return out;
}

NTTParams init_params(const NTTConfig& c) {
  validate(c);
  Rng rng(derive_seed(c.seed, "init"));
  const std::size_t d = c.d_model;
  NTTParams p;
  p.embed1 = Linear("embed.0", c.schema.width(), d, rng);
  p.embed2 = Linear("embed.1", d, d, rng);
  if (c.scheme.uses_level1()) p.level1 = Linear("agg.level1", c.scheme.factor * d, d, rng);
  if (c.scheme.uses_level2()) p.level2 = Linear("agg.level2", c.scheme.factor * d, d, rng);
  p.positional = Parameter("positional", Tensor({c.scheme.slots(), d}));
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string name = "encoder." + std::to_string(i);
    EncoderBlock b;
    b.ln1 = nn::LayerNormParams(name + ".ln1", d);
    b.attn = nn::AttentionParams(name + ".attn", d, c.n_heads, rng);
    b.ln2 = nn::LayerNormParams(name + ".ln2", d);
    b.ff = nn::FeedForwardParams(name + ".ff", d, c.d_ff, rng);
    p.blocks.push_back(std::move(b));
  }
  p.delay_head = make_head("head.delay", d, d, rng);
  return p;
}

MlpHead make_mct_head(const NTTConfig& c) {
  Rng rng(derive_seed(c.seed, "mct_head"));
  return make_head("head.mct", c.d_model + 1, c.d_model, rng);
}

std::pair<NTTConfig, NTTParams> build_variant(Variant kind, std::uint64_t seed, const NTTConfig& base) {
  NTTConfig c = base;
  c.seed = seed;
  const std::size_t slots = base.scheme.slots();
  switch (kind) {
    case Variant::FULL:
      break;
    case Variant::NO_AGG:
      c.aggregation = AggregationKind::NONE;
      c.scheme = AggregationScheme::none(slots);
      break;
    case Variant::FIXED_AGG:
      c.aggregation = AggregationKind::FIXED;
      c.scheme = AggregationScheme::fixed(slots, base.scheme.window_length() / slots);
      break;
    case Variant::NO_DELAY:
      c.schema.use_delay = false;
      break;
    case Variant::NO_SIZE:
      c.schema.use_size = false;
      break;
  }
  NTTParams p = init_params(c);
  return {c, std::move(p)};
}

SequenceWindow featurize_window(std::span<const trace::PacketRecord> records, std::size_t window_length,
                                const FeatureSchema& schema, const Normalizer& norm) {
  if (records.size() != window_length) {
    throw ValidationError("window needs " + std::to_string(window_length) + " records, got " +
                          std::to_string(records.size()));
  }
  const auto& newest = records.back();
  SequenceWindow w;
  w.sim_id = newest.sim_id;
  w.target_delay = newest.delay;
  w.features = Tensor({window_length, schema.width()});
  for (std::size_t i = 0; i < window_length; ++i) {
    const auto& r = records[i];
    if (r.sim_id != newest.sim_id) {
      throw ValidationError("window spans runs " + std::to_string(r.sim_id) + " and " +
                            std::to_string(newest.sim_id));
    }
    if (r.receiver_id < 0 || static_cast<std::size_t>(r.receiver_id) >= schema.n_receivers) {
      throw ValidationError("receiver id " + std::to_string(r.receiver_id) + " exceeds one-hot width " +
                            std::to_string(schema.n_receivers));
    }
    const double dt = r.send_time - newest.send_time;
    w.features.at(i, schema.col_dt()) = (dt - norm.dt_mean) / norm.dt_std;
    if (schema.use_size) {
      w.features.at(i, schema.col_size()) = (static_cast<double>(r.size) - norm.size_mean) / norm.size_std;
    }
    w.features.at(i, schema.col_receiver(static_cast<std::size_t>(r.receiver_id))) = 1.0;
    if (schema.use_delay) w.features.at(i, schema.col_delay()) = (r.delay - norm.delay_mean) / norm.delay_std;
  }
  return w;
}

SequenceWindow mask_last_delay(SequenceWindow window, const FeatureSchema& schema) {
  if (!schema.use_delay) {
    window.mask_skipped = true;
    return window;
  }
  const std::size_t last = window.features.rows() - 1;
  window.features.at(last, schema.col_delay()) = 0.0;
  window.features.at(last, schema.col_mask()) = 1.0;
  return window;
}

Var embed(Graph& g, Var features, NTTParams& p, const NTTConfig& c) {
  if (g.value(features).cols() != c.schema.width()) {
    throw ShapeError("embed: feature width " + std::to_string(g.value(features).cols()) +
                     " does not match schema width " + std::to_string(c.schema.width()));
  }
  return nn::linear_forward(g, g.relu(nn::linear_forward(g, features, p.embed1)), p.embed2);
}

Var aggregate_multiscale(Graph& g, Var embedded, NTTParams& p, const NTTConfig& c, bool positional) {
  const auto& s = c.scheme;
  const std::size_t d = c.d_model;
  const std::size_t L = g.value(embedded).rows();
  if (L != s.window_length()) {
    throw ShapeError("aggregate: expected " + std::to_string(s.window_length()) + " packets, got " +
                     std::to_string(L));
  }
  std::vector<Var> parts;
  const std::size_t n_l1_rows = s.level2_groups * s.factor + s.level1_groups;  // level-1 outputs
  const std::size_t n_agg_packets = n_l1_rows * s.factor;
  if (n_l1_rows > 0) {
    // Consecutive groups of `factor` rows flatten to one row of factor*d.
    const Var grouped = g.reshape(g.slice_rows(embedded, 0, n_agg_packets), n_l1_rows, s.factor * d);
    const Var l1 = nn::linear_forward(g, grouped, p.level1);
    if (s.level2_groups > 0) {
      const Var l1_old = g.reshape(g.slice_rows(l1, 0, s.level2_groups * s.factor), s.level2_groups, s.factor * d);
      parts.push_back(nn::linear_forward(g, l1_old, p.level2));
    }
    if (s.level1_groups > 0) parts.push_back(g.slice_rows(l1, s.level2_groups * s.factor, s.level1_groups));
  }
  if (s.raw_count > 0) {
    parts.push_back(n_agg_packets == 0 ? embedded : g.slice_rows(embedded, n_agg_packets, s.raw_count));
  }
  Var slots = parts.size() == 1 ? parts[0] : g.concat_rows(parts);
  if (positional) slots = g.add(slots, g.param(p.positional));
  return slots;
}

Var encode(Graph& g, Var x, NTTParams& p, const NTTConfig& c) {
  if (g.value(x).cols() != c.d_model) {
    throw ShapeError("encode: input " + nn::shape_string(g.value(x).shape()) + " for d_model " +
                     std::to_string(c.d_model));
  }
  for (auto& b : p.blocks) {
    x = g.add(x, nn::multi_head_attention(g, nn::layer_norm(g, x, b.ln1), b.attn));
    x = g.add(x, nn::feed_forward(g, nn::layer_norm(g, x, b.ln2), b.ff));
  }
  return x;
}

Var predict_delay_from_slot(Graph& g, Var slot, NTTParams& p) { return head_forward(g, slot, p.delay_head); }

Var predict_delay(Graph& g, Var encoded, NTTParams& p) {
  return predict_delay_from_slot(g, g.slice_rows(encoded, g.value(encoded).rows() - 1, 1), p);
}

Var predict_log_mct_from_slot(Graph& g, Var slot, std::int64_t message_size, const Normalizer& norm,
                              NTTParams& p) {
  if (message_size <= 0) throw ValidationError("message size must be positive, got " + std::to_string(message_size));
  if (!p.mct_head) throw StateError("model has no log-MCT head attached");
  const double z = (std::log(static_cast<double>(message_size)) - norm.log_msg_mean) / norm.log_msg_std;
  const Var in = g.concat_cols({slot, g.constant(Tensor::scalar(z))});
  return head_forward(g, in, *p.mct_head);
}

Var predict_log_mct(Graph& g, Var encoded, std::int64_t message_size, const Normalizer& norm, NTTParams& p) {
  return predict_log_mct_from_slot(g, g.slice_rows(encoded, g.value(encoded).rows() - 1, 1), message_size, norm,
                                   p);
}

Var forward_encoder(Graph& g, const Tensor& features, NTTParams& p, const NTTConfig& c) {
  const Var x = g.constant(features);
  return encode(g, aggregate_multiscale(g, embed(g, x, p, c), p, c), p, c);
}

Tensor encode_newest_slot(const Tensor& features, NTTParams& p, const NTTConfig& c) {
  Graph g(false);
  const Var enc = forward_encoder(g, features, p, c);
  return g.value(g.slice_rows(enc, g.value(enc).rows() - 1, 1));
}

nn::Checkpoint to_checkpoint(NTTParams& p, const NTTConfig& c, const Normalizer& norm, nlohmann::json extra_meta) {
  nn::Checkpoint ckpt;
  for (auto* param : p.all_parameters()) ckpt.arrays.push_back({param->name, param->value});
  ckpt.meta = std::move(extra_meta);
  ckpt.meta["config"] = c;
  ckpt.meta["normalizer"] = norm;
  return ckpt;
}

LoadedModel from_checkpoint(const nn::Checkpoint& ckpt) {
  LoadedModel m;
  if (!ckpt.meta.contains("config") || !ckpt.meta.contains("normalizer")) {
    throw ValidationError("checkpoint meta lacks model config or normalizer");
  }
  m.config = ckpt.meta.at("config").get<NTTConfig>();
  m.normalizer = ckpt.meta.at("normalizer").get<Normalizer>();
  m.meta = ckpt.meta;
  m.params = init_params(m.config);
  bool has_mct = false;
  for (const auto& a : ckpt.arrays) has_mct = has_mct || a.name.rfind("head.mct.", 0) == 0;
  if (has_mct) m.params.mct_head = make_mct_head(m.config);
  const auto params = m.params.all_parameters();
  if (params.size() != ckpt.arrays.size()) {
    throw ValidationError("checkpoint holds " + std::to_string(ckpt.arrays.size()) + " arrays, model expects " +
                          std::to_string(params.size()));
  }
  for (auto* param : params) {
    const auto& t = ckpt.at(param->name);
    if (t.shape() != param->value.shape()) {
      throw ValidationError("checkpoint array '" + param->name + "' has shape " + nn::shape_string(t.shape()) +
                            ", model expects " + nn::shape_string(param->value.shape()));
    }
    param->value = t;
  }
  return m;
}

nn::GradcheckReport gradcheck_tiny_ntt(std::uint64_t seed, double tolerance) {
  const NTTConfig c = tiny_config(seed);
  NTTParams p = init_params(c);
  p.mct_head = make_mct_head(c);
  Rng rng(derive_seed(seed, "gradcheck/inputs"));
  // Non-zero biases, gains and positions so every coordinate carries signal.
  for (auto* param : p.all_parameters()) {
    for (auto& v : param->value.values()) v += 0.1 * rng.normal();
  }
  const std::size_t L = c.window_length();
  SequenceWindow w;
  w.features = Tensor({L, c.schema.width()});
  for (std::size_t i = 0; i < L; ++i) {
    w.features.at(i, c.schema.col_dt()) = rng.normal();
    w.features.at(i, c.schema.col_size()) = rng.normal();
    w.features.at(i, c.schema.col_receiver(rng.below(c.schema.n_receivers))) = 1.0;
    w.features.at(i, c.schema.col_delay()) = rng.normal();
  }
  w = mask_last_delay(std::move(w), c.schema);
  const Normalizer norm = Normalizer::identity();
  // Targets sit close to the initial predictions. Central differences then
  // subtract two small losses, which keeps roundoff below the tolerance on
  // coordinates whose true gradient is exactly zero (attention key biases).
  double delay_target = 0.0, mct_target = 0.0;
  {
    Graph g(false);
    const Var enc = forward_encoder(g, w.features, p, c);
    delay_target = g.value(predict_delay(g, enc, p)).at(0, 0) + 1e-3 * rng.normal();
    mct_target = g.value(predict_log_mct(g, enc, 3000, norm, p)).at(0, 0) + 1e-3 * rng.normal();
  }
  const nn::ForwardFn forward = [&](Graph& g) {
    const Var enc = forward_encoder(g, w.features, p, c);
    const Var d = predict_delay(g, enc, p);
    const Var m = predict_log_mct(g, enc, 3000, norm, p);
    const Var ld = g.mse(d, g.constant(Tensor::scalar(delay_target)));
    const Var lm = g.mse(m, g.constant(Tensor::scalar(mct_target)));
    return g.add(ld, lm);
  };
  nn::GradcheckOptions opts;
  opts.tolerance = tolerance;
  opts.seed = seed;
  return nn::gradcheck(forward, p.all_parameters(), opts);
}

std::string to_string(BaselineKind k) { return k == BaselineKind::LAST_OBSERVED ? "LAST_OBSERVED" : "EWMA"; }

}  // namespace nttlab::model
