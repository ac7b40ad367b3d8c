#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nttlab/checkpoint.hpp"
#include "nttlab/gradcheck.hpp"
#include "nttlab/layers.hpp"
#include "nttlab/trace.hpp"

namespace nttlab::model {

using nn::Graph;
using nn::Linear;
using nn::Parameter;
using nn::ParameterList;
using nn::Tensor;
using nn::Var;

/// Column order: dt, size, receiver one-hot..., delay, mask_flag.
/// Ablated columns are absent, not zeroed.
struct FeatureSchema {
  bool use_size = true;
  bool use_delay = true;
  std::size_t n_receivers = 3;

  std::size_t width() const { return 2 + n_receivers + (use_size ? 1 : 0) + (use_delay ? 1 : 0); }
  std::size_t col_dt() const { return 0; }
  std::size_t col_size() const { return 1; }
  std::size_t col_receiver(std::size_t k) const { return (use_size ? 2 : 1) + k; }
  std::size_t col_delay() const { return col_receiver(n_receivers); }
  std::size_t col_mask() const { return width() - 1; }

  bool operator==(const FeatureSchema&) const = default;
};

/// z-scores for the raw packet fields and the message-level quantities.
struct Normalizer {
  double dt_mean = 0.0, dt_std = 1.0;
  double size_mean = 0.0, size_std = 1.0;
  double delay_mean = 0.0, delay_std = 1.0;
  double log_msg_mean = 0.0, log_msg_std = 1.0;
  double log_mct_mean = 0.0, log_mct_std = 1.0;

  static Normalizer identity() { return {}; }
  bool operator==(const Normalizer&) const = default;
};

void to_json(nlohmann::json& j, const Normalizer& n);
void from_json(const nlohmann::json& j, Normalizer& n);

struct SequenceWindow {
  Tensor features;  // [L x F], oldest -> newest
  std::int64_t sim_id = 0;
  double target_delay = 0.0;  // seconds, newest packet
  std::int64_t message_size = 0;  // bytes of the message starting at the newest packet, 0 if none
  double target_log_mct = 0.0;
  bool mask_skipped = false;  // mask_last_delay had no delay column to mask
};

/// Packets in the window: raw_count + level1_groups*factor + level2_groups*factor^2.
/// Output slots, oldest first: level-2 groups, level-1 groups, raw packets.
struct AggregationScheme {
  std::size_t raw_count = 16;
  std::size_t level1_groups = 22;
  std::size_t level2_groups = 10;
  std::size_t factor = 9;

  static AggregationScheme multiscale() { return {16, 22, 10, 9}; }
  static AggregationScheme none(std::size_t length = 48) { return {length, 0, 0, 1}; }
  static AggregationScheme fixed(std::size_t groups = 48, std::size_t factor = 21) { return {0, groups, 0, factor}; }

  std::size_t window_length() const {
    return raw_count + level1_groups * factor + level2_groups * factor * factor;
  }
  std::size_t slots() const { return raw_count + level1_groups + level2_groups; }
  bool uses_level1() const { return level1_groups + level2_groups > 0; }
  bool uses_level2() const { return level2_groups > 0; }

  bool operator==(const AggregationScheme&) const = default;
};

enum class AggregationKind { MULTISCALE, NONE, FIXED };

std::string to_string(AggregationKind k);
AggregationKind parse_aggregation(const std::string& text);

struct NTTConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 3;
  std::size_t d_ff = 128;
  FeatureSchema schema;
  AggregationKind aggregation = AggregationKind::MULTISCALE;
  AggregationScheme scheme = AggregationScheme::multiscale();
  std::uint64_t seed = 0;

  std::size_t window_length() const { return scheme.window_length(); }
  bool operator==(const NTTConfig&) const = default;
};

void to_json(nlohmann::json& j, const NTTConfig& c);
void from_json(const nlohmann::json& j, NTTConfig& c);

/// Throws ConfigError on inconsistent settings.
void validate(const NTTConfig& c);

/// The config used by the gradient-check harness: d_model 8, 2 heads,
/// 1 layer, 32-packet windows aggregated 4 raw + 4x2 + 5x4.
NTTConfig tiny_config(std::uint64_t seed);

enum class Variant { FULL, NO_AGG, FIXED_AGG, NO_DELAY, NO_SIZE };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);
inline constexpr Variant kAllVariants[] = {Variant::FULL, Variant::NO_AGG, Variant::FIXED_AGG,
                                           Variant::NO_DELAY, Variant::NO_SIZE};

enum class Task { DELAY, LOG_MCT };

std::string to_string(Task t);
Task parse_task(const std::string& text);

struct EncoderBlock {
  nn::LayerNormParams ln1;
  nn::AttentionParams attn;
  nn::LayerNormParams ln2;
  nn::FeedForwardParams ff;
};

struct MlpHead {
  Linear hidden;
  Linear out;
};

struct NTTParams {
  Linear embed1, embed2;
  Linear level1, level2;  // empty when the scheme does not use them
  Parameter positional;  // [slots x d_model]
  std::vector<EncoderBlock> blocks;
  MlpHead delay_head;
  std::optional<MlpHead> mct_head;

  /// Everything except the decoder heads.
  ParameterList body_parameters();
  ParameterList delay_head_parameters();
  ParameterList mct_head_parameters();
  ParameterList all_parameters();
};

NTTParams init_params(const NTTConfig& config);

/// Fresh log-MCT head, seeded from the config seed.
MlpHead make_mct_head(const NTTConfig& config);

std::pair<NTTConfig, NTTParams> build_variant(Variant kind, std::uint64_t seed,
                                              const NTTConfig& base = NTTConfig{});

/// Records must be one run, contiguous, oldest first, exactly
/// `window_length` long. Nothing is masked yet.
SequenceWindow featurize_window(std::span<const trace::PacketRecord> records, std::size_t window_length,
                                const FeatureSchema& schema, const Normalizer& norm);

/// Zeroes the newest delay feature and raises its mask flag.
SequenceWindow mask_last_delay(SequenceWindow window, const FeatureSchema& schema);

Var embed(Graph& g, Var features, NTTParams& p, const NTTConfig& c);
/// `positional = false` returns the slots before the positional add.
Var aggregate_multiscale(Graph& g, Var embedded, NTTParams& p, const NTTConfig& c, bool positional = true);
Var encode(Graph& g, Var slots, NTTParams& p, const NTTConfig& c);
/// Newest-slot delay prediction on the normalized scale, [1 x 1].
Var predict_delay(Graph& g, Var encoded, NTTParams& p);
/// Reads the newest slot vector [1 x d] directly.
Var predict_delay_from_slot(Graph& g, Var slot, NTTParams& p);
Var predict_log_mct(Graph& g, Var encoded, std::int64_t message_size, const Normalizer& norm, NTTParams& p);
Var predict_log_mct_from_slot(Graph& g, Var slot, std::int64_t message_size, const Normalizer& norm,
                              NTTParams& p);

/// features -> embed -> aggregate -> encode, returning the encoded slots.
Var forward_encoder(Graph& g, const Tensor& features, NTTParams& p, const NTTConfig& c);
/// Newest encoded slot of a window, evaluated without gradients.
Tensor encode_newest_slot(const Tensor& features, NTTParams& p, const NTTConfig& c);

nn::Checkpoint to_checkpoint(NTTParams& p, const NTTConfig& c, const Normalizer& norm,
                             nlohmann::json extra_meta = nlohmann::json::object());

struct LoadedModel {
  NTTConfig config;
  NTTParams params;
  Normalizer normalizer;
  nlohmann::json meta;
};

/// Rebuilds parameters from a checkpoint; shape mismatches are reported
/// with both shapes.
LoadedModel from_checkpoint(const nn::Checkpoint& ckpt);

/// Full forward/backward of the tiny config (both heads) against central
/// differences on a random masked window.
nn::GradcheckReport gradcheck_tiny_ntt(std::uint64_t seed, double tolerance = 1e-4);

enum class BaselineKind { LAST_OBSERVED, EWMA };

inline constexpr double kEwmaAlpha = 0.01;

std::string to_string(BaselineKind k);
double baseline_predict(BaselineKind kind, std::span<const double> history, double alpha = kEwmaAlpha);

}  // namespace nttlab::model
