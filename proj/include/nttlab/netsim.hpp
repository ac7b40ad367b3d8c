#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nttlab/rng.hpp"
#include "nttlab/trace.hpp"

namespace nttlab::netsim {

inline constexpr const char* kGeneratorVersion = "nttlab-netsim-1";

enum class Scenario { PRETRAIN, CASE1, CASE2 };
enum class Scale { PAPER, DESK };

std::string to_string(Scenario s);
std::string to_string(Scale s);
Scenario parse_scenario(const std::string& text);
Scale parse_scale(const std::string& text);

/// Unidirectional link feeding a drop-tail FIFO. `queue_capacity` counts
/// waiting packets; the packet in transmission is not part of the queue.
struct LinkSpec {
  int from_node = 0;
  int to_node = 0;
  double bandwidth = 0.0;   // bits/s
  double prop_delay = 0.0;  // s
  int queue_capacity = 1;   // packets
};

struct SizeDistribution {
  enum class Kind { POINT_MASS, TRUNCATED_LOGNORMAL };
  Kind kind = Kind::TRUNCATED_LOGNORMAL;
  std::int64_t point = 1500;
  double mu = 0.0;  // log-space location
  double sigma = 1.0;
  std::int64_t min_size = 1;
  std::int64_t max_size = 1;

  static SizeDistribution point_mass(std::int64_t bytes);
  /// Log-normal, location ln(4000 B), shape 2.0, truncated to [100 B, 2 MB].
  static SizeDistribution default_workload();

  /// Closed-form mean of the (truncated) distribution, in bytes.
  double analytic_mean() const;
};

/// A fixed message injected at a given time, bypassing the random workload.
struct ScriptedMessage {
  int sender = 0;
  double time = 0.0;
  std::int64_t size = 0;
  int receiver = 0;
};

struct WorkloadSpec {
  int n_senders = 1;
  double per_sender_rate = 1e6;  // offered bits/s per sender
  SizeDistribution size_dist = SizeDistribution::default_workload();
  double start_jitter = 1.0;  // s
  int mss = 1500;
  /// Attachment node of each sender (size n_senders).
  std::vector<int> sender_nodes;
  /// Receiver nodes; receiver_id is the index into this list.
  std::vector<int> receiver_nodes;
  /// Rate at which a sender hands a message's packets to the network;
  /// 0 hands all packets over at the message arrival instant.
  double pacing_rate = 0.0;
  /// When non-empty, replaces random message generation.
  std::vector<ScriptedMessage> scripted;
};

struct CrossTrafficSpec {
  int n_flows = 0;
  double aggregate_target = 0.0;  // bits/s, split evenly across flows as a pacing cap
  int entry_node = 0;
  int exit_node = 0;
  int mss = 1500;
};

struct SimConfig {
  Scenario scenario = Scenario::PRETRAIN;
  std::vector<LinkSpec> links;
  WorkloadSpec workload;
  std::vector<CrossTrafficSpec> cross_traffic;
  double duration = 1.0;
  int n_runs = 1;
  std::uint64_t seed = 0;
  /// Receiver-window cap on the TCP congestion window, packets.
  double tcp_max_cwnd = 1000.0;
};

void to_json(nlohmann::json& j, const SimConfig& c);
void from_json(const nlohmann::json& j, SimConfig& c);
std::string config_hash(const SimConfig& c);

/// Throws ConfigError when the config cannot be simulated.
void validate(const SimConfig& config);

SimConfig build_scenario(Scenario kind, Scale scale, std::uint64_t seed);

std::int64_t sample_message_size(const SizeDistribution& dist, Rng& rng);

// ---- TCP cross-traffic model ------------------------------------------------

enum class TcpPhase { SLOW_START, AVOIDANCE };
enum class TcpEvent { ACK, LOSS, TIMEOUT };

struct TcpFlowState {
  double cwnd = 1.0;
  double ssthresh = 1e9;
  double in_flight = 0.0;
  TcpPhase phase = TcpPhase::SLOW_START;
  double rtt_estimate = 0.0;
};

TcpFlowState step_tcp_flow(TcpFlowState state, TcpEvent event);

// ---- Simulation -------------------------------------------------------------

struct LinkStats {
  int max_occupancy = 0;
  std::int64_t departures = 0;
  std::int64_t drops = 0;
  std::int64_t fifo_violations = 0;
  /// Departures spaced closer than their own transmission time.
  std::int64_t rate_violations = 0;
  double busy_time = 0.0;
};

struct RunStats {
  std::int64_t workload_sent = 0;
  std::int64_t workload_delivered = 0;
  std::int64_t workload_dropped = 0;
  std::int64_t cross_sent = 0;
  std::int64_t cross_delivered = 0;
  std::int64_t cross_dropped = 0;
  std::int64_t tcp_timeouts = 0;
  std::int64_t tcp_losses = 0;
  std::vector<LinkStats> links;
};

struct RunResult {
  std::vector<trace::PacketRecord> records;
  RunStats stats;
  std::int64_t messages_generated = 0;
};

/// Simulates one run; records carry sim_id = run_index and message ids
/// local to the run.
RunResult simulate_run(const SimConfig& config, int run_index);

/// All runs, merged in run-index order; only workload packets are emitted.
trace::TraceDataset run_simulation(const SimConfig& config);

/// Minimum send-to-delivery time for a packet of `size` bytes on the path.
double uncongested_delay(const SimConfig& config, int sender, int receiver, std::int64_t size);

// ---- Statistics -------------------------------------------------------------

struct Distribution {
  double mean = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
  double p99 = 0.0;
  double p999 = 0.0;
  double max = 0.0;
};

/// Nearest-rank percentile of an ascending-sorted sample, p in (0, 100].
double nearest_rank(const std::vector<double>& sorted, double p);
Distribution summarize(std::vector<double> values);

struct TraceStats {
  std::size_t packet_count = 0;
  std::size_t run_count = 0;
  std::size_t message_count = 0;
  Distribution delay;
  Distribution mct;
  std::int64_t drop_inferred_gaps = 0;
  /// gaps / (gaps + packets)
  double gap_fraction = 0.0;
};

TraceStats trace_stats(const trace::TraceDataset& dataset);
nlohmann::json to_json(const TraceStats& s);
std::string format_stats_line(const TraceStats& s);

}  // namespace nttlab::netsim
